use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cfsg_core::checkpoint;
use cfsg_core::crf;
use cfsg_core::dataset::{aerial_tiles, field_tiles, scene_seed};
use cfsg_core::evaluation::{ConfusionMatrix, Report};
use cfsg_core::imaging::{
    domain_shift, load_image, load_mask, resize_bilinear, resize_nearest, save_gray,
    save_mask, save_rgb8, synth_scene, write_atomic, LabelMask, SceneSpec, CLASS_NAMES, NUM_CLASSES,
};
use cfsg_core::mapping::{
    fit_line, ground_area, ground_side_cm, plan_tiles, predict_roi, prescription_with_threshold,
    spray_csv_row, spray_stats, weed_heatmap, LinearFit, RegionOfInterest, SprayStats,
    SPRAY_CSV_HEADER,
};
use cfsg_core::training::{self, history_csv, ClassWeights, Sample};
use cfsg_core::Error;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::store::{
    self, decode_probabilities, encode_probabilities, list_images, load_dataset, mask_for, Manifest,
    ManifestEntry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Field-domain training tiles.
    Field,
    /// Aerial-style degraded tiles.
    Aerial,
    /// Whole degraded scenes at tile resolution, for tiled prediction.
    Roi,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Synthetic ROI: a scene brought to the working resolution, then degraded.
pub fn synth_roi(spec: &SceneSpec, cfg: &PipelineConfig) -> cfsg_core::Result<(cfsg_core::imaging::ImageRgb, LabelMask)> {
    let (image, mask) = synth_scene(spec)?;
    let (w, h) = (cfg.preprocessing.work_width, cfg.preprocessing.work_height);
    let small = resize_bilinear(&image, w, h);
    Ok((domain_shift(&small, &cfg.synthetic.domain_shift), resize_nearest(&mask, w, h)))
}

pub fn synth(cfg: &PipelineConfig, out: &Path, count: usize, kind: SynthKind) -> anyhow::Result<Manifest> {
    if count == 0 {
        bail!(Error::Config("count must be at least 1".into()));
    }
    let base = cfg.synthetic.seed;
    let spec = &cfg.synthetic.scene;
    let per_scene = match kind {
        SynthKind::Roi => 1,
        _ => cfg.preprocessing.tiles_per_image.max(1),
    };
    let scenes = count.div_ceil(per_scene);
    let seeds: Vec<u64> = (0..scenes).map(|i| scene_seed(base, i)).collect();
    let mut samples: Vec<Sample> = match kind {
        SynthKind::Field => field_tiles(spec, &seeds, &cfg.preprocessing)?,
        SynthKind::Aerial => aerial_tiles(spec, &seeds, &cfg.preprocessing, &cfg.synthetic.domain_shift)?,
        SynthKind::Roi => seeds
            .iter()
            .map(|&seed| {
                let (image, mask) = synth_roi(&SceneSpec { seed, ..spec.clone() }, cfg)?;
                Ok(Sample { image, mask })
            })
            .collect::<cfsg_core::Result<_>>()?,
    };
    samples.truncate(count);
    let entries = (0..samples.len())
        .map(|i| ManifestEntry {
            image: store::image_name(i),
            mask: store::mask_name(i),
            scene_seed: seeds[i / per_scene],
        })
        .collect();
    let manifest = Manifest {
        kind: serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string(),
        base_seed: base,
        scene_seeds: seeds,
        entries,
        config: serde_json::json!({
            "scene": spec,
            "preprocessing": cfg.preprocessing,
            "domain_shift": cfg.synthetic.domain_shift,
        }),
    };
    store::write_dataset(out, &samples, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub class_weights: Vec<f32>,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

/// Trains on `train_dir`, checkpointing every new best epoch atomically.
pub fn train(cfg: &PipelineConfig, train_dir: &Path, val_dir: &Path, out: &Path) -> anyhow::Result<TrainSummary> {
    let train_set = load_dataset(train_dir)?;
    let val_set = load_dataset(val_dir)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let history = history_path(out);
    let mut records = Vec::new();
    let outcome = training::train(&train_set, &val_set, &cfg.architecture, &cfg.training, |r, model, best| {
        records.push(r.clone());
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  mIoU {:.4}  lr {:.2e}{}",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr,
            if best { "  *" } else { "" }
        );
        if best {
            checkpoint::save(model, out)?;
        }
        write_atomic(&history, history_csv(&records).as_bytes())
    })?;
    checkpoint::save(&outcome.model, out)?;
    write_atomic(&history, history_csv(&outcome.history).as_bytes())?;
    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .context("best epoch missing from history")?;
    Ok(TrainSummary {
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_miou: best.val_miou,
        class_weights: outcome.class_weights.0.clone(),
        checkpoint: out.to_path_buf(),
        history,
    })
}

#[derive(Debug, Clone, Default)]
pub struct PredictOptions {
    pub crf: Option<bool>,
    pub tile: Option<usize>,
    pub overlap: Option<usize>,
    pub gsd: Option<f64>,
    pub grids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub grid_px: usize,
    pub ground_side_cm: f64,
    pub ground_area_cm2: f64,
    pub cells: usize,
    pub free_weed_grids: usize,
    pub weed_grids: usize,
    pub spraying_rate: String,
    pub saving_rate: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictSummary {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    pub tiles: usize,
    pub crf: bool,
    pub gsd_mm_per_px: f64,
    pub class_pixels: Vec<u64>,
    pub grids: Vec<GridSummary>,
    /// Grid sizes skipped because they exceed the ROI.
    pub skipped_grids: Vec<usize>,
    pub fit: Option<LinearFit>,
}

/// Tiled prediction of one image plus every mapping product.
pub fn predict(cfg: &PipelineConfig, ckpt: &Path, input: &Path, out: &Path, opts: &PredictOptions) -> anyhow::Result<PredictSummary> {
    let model = checkpoint::load(ckpt)?;
    let image = load_image(input)?;
    let m = &cfg.mapping;
    let tile = opts.tile.unwrap_or(m.tile_size);
    let overlap = opts.overlap.unwrap_or(m.overlap).min(tile.saturating_sub(1));
    let gsd = opts.gsd.unwrap_or(m.gsd_mm_per_px);
    let use_crf = opts.crf.unwrap_or(m.use_crf);
    let grids = opts.grids.clone().unwrap_or_else(|| m.grids.clone());
    let roi = RegionOfInterest::new(image, gsd)?;
    let plan = plan_tiles(&roi, tile, overlap).map_err(|e| Error::Data(e.to_string()))?;
    let pred = predict_roi(&model, &roi, &plan, use_crf.then_some(&cfg.crf))?;

    create_dir(out)?;
    save_mask(&pred.mask, &out.join("mask.png"))?;
    save_rgb8(&pred.mask.to_color(), &out.join("mask_color.png"))?;
    write_atomic(&out.join("probabilities.bin"), &encode_probabilities(&pred.probabilities))?;
    save_gray(&weed_heatmap(&pred.mask, m.heatmap_sigma).to_gray8(), &out.join("heatmap.png"))?;

    let (w, h) = (pred.mask.width, pred.mask.height);
    let mut rows = vec![SPRAY_CSV_HEADER.to_string()];
    let mut summaries = Vec::new();
    let mut skipped = Vec::new();
    let mut points = Vec::new();
    for &g in &grids {
        if g == 0 || g > w || g > h {
            skipped.push(g);
            continue;
        }
        let pmap = prescription_with_threshold(&pred.mask, g, m.min_weed_pixels)?;
        let stats = spray_stats(&pmap)?;
        save_gray(&pmap.to_gray8(), &out.join(format!("prescription_{g}.png")))?;
        write_atomic(&out.join(format!("prescription_{g}.csv")), pmap.to_csv().as_bytes())?;
        rows.push(spray_csv_row(g, gsd, &stats));
        points.push((ground_side_cm(g, gsd), stats.saving_rate()));
        summaries.push(grid_summary(g, gsd, &stats));
    }
    write_atomic(&out.join("spray_stats.csv"), (rows.join("\n") + "\n").as_bytes())?;
    let fit = if points.len() >= 2 { fit_line(&points).ok() } else { None };
    let summary = PredictSummary {
        width: w,
        height: h,
        tile_size: tile,
        overlap,
        tiles: plan.origins.len(),
        crf: use_crf,
        gsd_mm_per_px: gsd,
        class_pixels: pred.mask.histogram(NUM_CLASSES),
        grids: summaries,
        skipped_grids: skipped,
        fit,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn grid_summary(g: usize, gsd: f64, s: &SprayStats) -> GridSummary {
    GridSummary {
        grid_px: g,
        ground_side_cm: ground_side_cm(g, gsd),
        ground_area_cm2: ground_area(g, gsd),
        cells: s.total(),
        free_weed_grids: s.free_weed_grids,
        weed_grids: s.weed_grids,
        spraying_rate: s.spraying_percent(),
        saving_rate: s.saving_percent(),
    }
}

pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// A directory of `mask_*.png` predictions named like the dataset's.
    Predictions(&'a Path),
}

pub fn eval(cfg: &PipelineConfig, data_dir: &Path, source: EvalSource, out: Option<&Path>) -> anyhow::Result<Report> {
    let cm = match source {
        EvalSource::Checkpoint(ckpt) => {
            let model = checkpoint::load(ckpt)?;
            let data = load_dataset(data_dir)?;
            let weights = ClassWeights::uniform(model.config().num_classes);
            training::evaluate(&model, &data, &weights, cfg.training.batch_size)?.1
        }
        EvalSource::Predictions(pred_dir) => {
            let images = list_images(data_dir)?;
            if images.is_empty() {
                bail!(Error::Data(format!("no img_*.png files in {}", data_dir.display())));
            }
            let mut cm = ConfusionMatrix::new(NUM_CLASSES);
            for img in &images {
                let truth_path = mask_for(img, data_dir);
                let pred_path = mask_for(img, pred_dir);
                for p in [&truth_path, &pred_path] {
                    if !p.exists() {
                        bail!(Error::Data(format!("missing mask {}", p.display())));
                    }
                }
                cm.accumulate(&load_mask(&pred_path)?, &load_mask(&truth_path)?)?;
            }
            cm
        }
    };
    let report = Report::new(&cm, &CLASS_NAMES)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_atomic(&dir.join("confusion.csv"), cm.to_csv(&CLASS_NAMES).as_bytes())?;
        write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
        write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    }
    Ok(report)
}

/// Refines a probability dump against its image and writes the labeling.
pub fn crf_refine(cfg: &PipelineConfig, image: &Path, probs: &Path, out: &Path) -> anyhow::Result<LabelMask> {
    let image = load_image(image)?;
    let probs = decode_probabilities(&std::fs::read(probs).with_context(|| format!("reading {}", probs.display()))?)?;
    let mask = crf::refine(&probs, 0, &image, &cfg.crf).map_err(|e| match e {
        Error::Shape { .. } => Error::Data(format!("probabilities do not match the image: {e}")),
        other => other,
    })?;
    save_mask(&mask, out)?;
    Ok(mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureIndex {
    pub layer: String,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub files: Vec<String>,
}

/// Feature maps of `layer` for the top-left crop of `image` whose sides are
/// multiples of 32.
pub fn featmaps(ckpt: &Path, image: &Path, layer: &str, out: &Path) -> anyhow::Result<FeatureIndex> {
    let model = checkpoint::load(ckpt)?;
    let image = load_image(image)?;
    let (w, h) = (image.width / 32 * 32, image.height / 32 * 32);
    if w == 0 || h == 0 {
        bail!(Error::Data(format!("image {}x{} is smaller than 32x32", image.width, image.height)));
    }
    let maps = model.extract_feature_maps(&image.crop(0, 0, w, h), layer)?;
    create_dir(out)?;
    let mut files = Vec::with_capacity(maps.len());
    for (c, m) in maps.iter().enumerate() {
        let name = format!("{layer}_{c:03}.png");
        save_gray(&m.to_gray8(), &out.join(&name))?;
        files.push(name);
    }
    let index = FeatureIndex {
        layer: layer.to_string(),
        channels: maps.len(),
        width: maps.first().map_or(0, |m| m.width),
        height: maps.first().map_or(0, |m| m.height),
        files,
    };
    write_json(&out.join("index.json"), &index)?;
    Ok(index)
}

#[derive(Debug, Clone, Serialize)]
pub struct SprayCurve {
    pub gsd_mm_per_px: f64,
    pub grids: Vec<GridSummary>,
    pub fit: LinearFit,
}

/// Saving rate per grid size and the fitted saving-vs-cell-side line.
pub fn spraycurve(mask: &Path, grids: &[usize], gsd: f64, min_weed_pixels: usize, out: &Path) -> anyhow::Result<SprayCurve> {
    if grids.len() < 2 {
        bail!(Error::Config("spraycurve needs at least two grid sizes".into()));
    }
    let mask = load_mask(mask)?;
    let mut rows = vec![SPRAY_CSV_HEADER.to_string()];
    let mut summaries = Vec::new();
    let mut points = Vec::new();
    for &g in grids {
        let stats = spray_stats(&prescription_with_threshold(&mask, g, min_weed_pixels).map_err(|e| Error::Data(e.to_string()))?)?;
        rows.push(spray_csv_row(g, gsd, &stats));
        points.push((ground_side_cm(g, gsd), stats.saving_rate()));
        summaries.push(grid_summary(g, gsd, &stats));
    }
    let fit = fit_line(&points)?;
    create_dir(out)?;
    write_atomic(&out.join("spray_curve.csv"), (rows.join("\n") + "\n").as_bytes())?;
    let curve = SprayCurve { gsd_mm_per_px: gsd, grids: summaries, fit };
    write_json(&out.join("fit.json"), &curve)?;
    Ok(curve)
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightsReport {
    pub classes: Vec<String>,
    pub pixel_counts: Vec<u64>,
    pub weights: Vec<f32>,
}

pub fn weights(data_dir: &Path) -> anyhow::Result<WeightsReport> {
    let data = load_dataset(data_dir)?;
    let mut counts = vec![0u64; NUM_CLASSES];
    for s in &data {
        for (a, c) in counts.iter_mut().zip(s.mask.histogram(NUM_CLASSES)) {
            *a += c;
        }
    }
    let w = ClassWeights::from_pixel_counts(&counts)?;
    Ok(WeightsReport {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        pixel_counts: counts,
        weights: w.0,
    })
}
