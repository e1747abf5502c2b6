//! Trains the desk-scale network on synthetic field tiles and scores it on
//! held-out field tiles and on aerial-style degraded tiles.
//!
//! cargo run --release -p cfsg-core --example cross_domain -- [seed] [scenes] [epochs]

use std::time::Instant;

use cfsg_core::dataset::{aerial_tiles, field_tiles, scene_seed};
use cfsg_core::imaging::{DomainShiftParams, PreprocessParams, SceneSpec};
use cfsg_core::network::ArchitectureConfig;
use cfsg_core::training::{evaluate, train, TrainConfig};

fn main() -> cfsg_core::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let seed = args.first().copied().unwrap_or(1);
    let scenes = args.get(1).copied().unwrap_or(200) as usize;
    let epochs = args.get(2).copied().unwrap_or(20) as usize;

    let spec = SceneSpec::default();
    let params = PreprocessParams::desk();
    let train_seeds: Vec<u64> = (0..scenes).map(|i| scene_seed(seed, i)).collect();
    let val_seeds: Vec<u64> = (0..40).map(|i| scene_seed(seed + 1000, i)).collect();
    let t0 = Instant::now();
    let train_set = field_tiles(&spec, &train_seeds, &params)?;
    let val_set = field_tiles(&spec, &val_seeds, &params)?;
    let aerial = aerial_tiles(&spec, &val_seeds, &params, &DomainShiftParams::default())?;
    println!("data: {} train / {} val tiles in {:.1}s", train_set.len(), val_set.len(), t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let out = train(&train_set, &val_set, &ArchitectureConfig::desk(), &cfg, |r, _, best| {
        println!(
            "epoch {:>2} train {:.4} val {:.4} mIoU {:.4} lr {:.2e}{} [{:.0}s]",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr, if best { " *" } else { "" }, t1.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let (_, cm_field) = evaluate(&out.model, &val_set, &out.class_weights, 16)?;
    let (_, cm_aerial) = evaluate(&out.model, &aerial, &out.class_weights, 16)?;
    let (mf, ma) = (cm_field.metrics()?, cm_aerial.metrics()?);
    println!("weights {:?}", out.class_weights.0);
    println!("field  mIoU {:.4} {:?}", mf.mean_iou, mf.per_class_iou);
    println!("aerial mIoU {:.4} {:?}", ma.mean_iou, ma.per_class_iou);
    println!("total {:.0}s", t1.elapsed().as_secs_f64());
    Ok(())
}
