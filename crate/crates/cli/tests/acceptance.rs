//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero when any criterion fails, except a check marked
//! unattainable, whose FAIL line is still printed.

#[path = "../../core/tests/common/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cfsg_cli::commands::{self, PredictOptions, SynthKind};
use cfsg_cli::config::PipelineConfig;
use cfsg_core::checkpoint;
use cfsg_core::crf::{energy, mean_field_infer, refine, CrfParams, UnaryField};
use cfsg_core::dataset::{aerial_tiles, field_tiles, scene_seed};
use cfsg_core::evaluation::ConfusionMatrix;
use cfsg_core::imaging::{domain_shift, resize_bilinear, synth_scene, DomainShiftParams, ImageRgb, LabelMask, PreprocessParams, SceneSpec};
use cfsg_core::mapping::{
    fit_line, ground_area, ground_side_cm, predict_roi, prescription, RegionOfInterest, SprayStats,
    TilePlan,
};
use cfsg_core::network::{ArchitectureConfig, Model};
use cfsg_core::tensor::{softmax_channels, Shape, Tensor};
use cfsg_core::training::{evaluate, train, ClassWeights, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let checks = [
        ("conv2d", gradcheck::conv2d_gradients()),
        ("batch_norm", gradcheck::batch_norm_train_gradients()),
        ("relu", gradcheck::relu_gradients()),
        ("pool/unpool", gradcheck::pool_unpool_composition_gradients()),
        ("softmax+wCE", gradcheck::softmax_weighted_cross_entropy_gradients()),
    ];
    let end_to_end = gradcheck::tiny_network_end_to_end_gradients();
    let elapsed = t.elapsed();
    let ops_ok = checks.iter().all(|(_, e)| *e < 1e-3);
    let e2e_ok = matches!(end_to_end, Ok(e) if e < 1e-2);
    let parts: Vec<String> = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        ops_ok && e2e_ok && elapsed < Duration::from_secs(120),
        format!(
            "{} instances each, worst rel err: {}; end-to-end {:?}; {:.1}s",
            gradcheck::INSTANCES,
            parts.join(", "),
            end_to_end.map(|e| format!("{e:.1e}")),
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_class_weights() -> Outcome {
    let w = ClassWeights::from_pixel_counts(&[100_000, 22_313, 8_208]).unwrap();
    let want = [1.0, 1.5, 2.5];
    let ok = w.0.iter().zip(want).all(|(g, e)| (*g as f64 - e).abs() <= 1e-3);
    outcome(ok, format!("weights {:?}", w.0))
}

fn c3_spray_arithmetic() -> Outcome {
    let rows = [
        (250, 504, "49.60", "50.40"),
        (266, 504, "52.78", "47.22"),
        (550, 2016, "27.28", "72.72"),
        (587, 2016, "29.12", "70.88"),
        (4080, 50851, "8.02", "91.98"),
        (4621, 50851, "9.09", "90.91"),
    ];
    let mut bad = Vec::new();
    for (weed, total, spray, save) in rows {
        let s = SprayStats::from_counts(weed, total).unwrap();
        if (s.spraying_percent().as_str(), s.saving_percent().as_str()) != (spray, save) {
            bad.push(format!("{weed}/{total} -> {}/{}", s.spraying_percent(), s.saving_percent()));
        }
    }
    let mask = LabelMask::new(2110, 2415);
    let cells: Vec<usize> = [100, 50, 10].iter().map(|&g| prescription(&mask, g).unwrap().cells.len()).collect();
    let ok = bad.is_empty() && cells == [504, 2016, 50851];
    outcome(ok, format!("6/6 rate pairs{}; grid cells {:?}", if bad.is_empty() { String::new() } else { format!(" except {bad:?}") }, cells))
}

fn c4_ground_area() -> Outcome {
    let side = ground_side_cm(100, 1.78);
    let area = ground_area(100, 1.78);
    let ok = side == 17.8 && (area - 17.8 * 17.8).abs() < 1e-9;
    outcome(ok, format!("grid 100 px at 1.78 mm/px -> {side} x {side} cm ({area:.2} cm^2)"))
}

fn random_probs(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Tensor {
    let logits = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random_range(-2.0..2.0));
    softmax_channels(&logits)
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
    ImageRgb::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// Piecewise-constant colours with noisy class evidence tied to each piece.
fn blocky_instance(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Tensor, ImageRgb) {
    let base: Vec<[f32; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let cut = (rng.random_range(1..w), rng.random_range(1..h));
    let region = |x: usize, y: usize| usize::from(x >= cut.0) + 2 * usize::from(y >= cut.1);
    let image = ImageRgb::from_fn(w, h, |x, y| base[region(x, y)].map(|c| (c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)));
    let class_of: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let logits = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let bias = if class_of[region(x, y)] == c { 1.0 } else { 0.0 };
        bias + rng.random_range(-1.5..1.5)
    });
    (softmax_channels(&logits), image)
}

fn exhaustive_minimum(unary: &UnaryField, image: &ImageRgb, params: &CrfParams) -> Vec<u8> {
    let n = unary.width * unary.height;
    let mut best = (f64::INFINITY, Vec::new());
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let labels: Vec<u8> = (0..n)
            .map(|_| {
                let l = (c % 3) as u8;
                c /= 3;
                l
            })
            .collect();
        let m = LabelMask::from_vec(unary.width, unary.height, labels).unwrap();
        let e = energy(&m, unary, image, params).unwrap();
        if e < best.0 {
            best = (e, m.data);
        }
    }
    best.1
}

/// Flip and denoise cases on grids up to 3x3: one odd pixel inside a
/// confident uniform field, weakly or strongly held. With a uniform colour
/// the field should absorb it; with its own colour and only the
/// colour-aware kernel active it should keep its label.
fn constructed_crf_cases() -> Vec<(UnaryField, ImageRgb, CrfParams)> {
    let mut cases = Vec::new();
    let defaults = CrfParams::default();
    let appearance_only = CrfParams { w2: 0.0, ..CrfParams::default() };
    for (w, h) in [(2, 1), (3, 1), (2, 2), (3, 2), (3, 3)] {
        for a in 0..3 {
            for b in (0..3).filter(|&b| b != a) {
                for odd in 0..w * h {
                    for strength in [0.5, 0.9] {
                        let mut probs = vec![[0.05; 3]; w * h];
                        for p in probs.iter_mut() {
                            p[a] = 0.9;
                        }
                        let rest = (1.0 - strength) / 2.0;
                        probs[odd] = [rest; 3];
                        probs[odd][b] = strength;
                        probs[odd][a] = rest + 0.05;
                        let unary = UnaryField::from_vec(w, h, 3, probs.iter().flat_map(|p| p.map(|v: f64| -v.ln())).collect()).unwrap();
                        let uniform = ImageRgb::from_fn(w, h, |_, _| [0.3, 0.5, 0.2]);
                        let edged = ImageRgb::from_fn(w, h, |x, y| if y * w + x == odd { [0.9, 0.1, 0.8] } else { [0.3, 0.5, 0.2] });
                        cases.push((unary.clone(), uniform, defaults.clone()));
                        cases.push((unary, edged, appearance_only.clone()));
                    }
                }
            }
        }
    }
    cases
}

fn c5_crf() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let zero = CrfParams { w1: 0.0, w2: 0.0, ..CrfParams::default() };
    let mut argmax_ok = 0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(2..12), rng.random_range(2..12));
        let probs = random_probs(&mut rng, w, h);
        let image = random_image(&mut rng, w, h);
        let unary = UnaryField::from_probabilities(&probs, 0);
        if mean_field_infer(&unary, &image, &zero).unwrap().1 == unary.argmin() {
            argmax_ok += 1;
        }
    }

    let cases = constructed_crf_cases();
    let agree = cases
        .iter()
        .filter(|(unary, image, p)| mean_field_infer(unary, image, p).unwrap().1.data == exhaustive_minimum(unary, image, p))
        .count();

    let params = CrfParams::default();

    let mut wins = 0;
    for _ in 0..100 {
        let (probs, image) = blocky_instance(&mut rng, 8, 8);
        let unary = UnaryField::from_probabilities(&probs, 0);
        let refined = refine(&probs, 0, &image, &params).unwrap();
        let e_ref = energy(&refined, &unary, &image, &params).unwrap();
        let e_arg = energy(&unary.argmin(), &unary, &image, &params).unwrap();
        if e_ref <= e_arg + 1e-9 {
            wins += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        argmax_ok == 50 && agree == cases.len() && wins >= 90 && elapsed < Duration::from_secs(180),
        format!(
            "(a) zero weights = argmax {argmax_ok}/50; (b) exhaustive agreement {agree}/{}; (c) energy not above argmax {wins}/100; {:.1}s",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c6_metrics() -> Outcome {
    let m = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap().metrics().unwrap();
    let got: Vec<f64> = m.per_class_accuracy.iter().chain(&m.per_class_iou).flatten().copied().collect();
    let want = [0.8333, 0.8750, 0.7692, 0.7000];
    let example_ok = got.len() == 4 && got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-4) && (m.mean_iou - 0.7346).abs() < 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut violations = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..6);
        let rows: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..200)).collect()).collect();
        let m = ConfusionMatrix::from_rows(&rows).unwrap().metrics().unwrap();
        for (iou, acc) in m.per_class_iou.iter().zip(&m.per_class_accuracy) {
            if let (Some(i), Some(a)) = (iou, acc) {
                if i > a {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        example_ok && violations == 0,
        format!(
            "accuracies {:.4?}, IoUs {:.4?}, mIoU {:.4}; IoU > accuracy on {violations} of 1000 random matrices",
            &got[..2.min(got.len())],
            &got[2.min(got.len())..],
            m.mean_iou
        ),
    )
}

const SCENES: usize = 200;
const VAL_SCENES: usize = 40;
const EPOCHS: usize = 10;
const BUDGET: Duration = Duration::from_secs(15 * 60);

struct SeedRun {
    field: f64,
    aerial: f64,
    elapsed: Duration,
    model: Model,
}

fn cross_domain_run(seed: u64) -> SeedRun {
    let spec = SceneSpec::default();
    let params = PreprocessParams::desk();
    let t = Instant::now();
    let train_seeds: Vec<u64> = (0..SCENES).map(|i| scene_seed(seed, i)).collect();
    let val_seeds: Vec<u64> = (0..VAL_SCENES).map(|i| scene_seed(seed + 1000, i)).collect();
    let train_set = field_tiles(&spec, &train_seeds, &params).unwrap();
    let val_set = field_tiles(&spec, &val_seeds, &params).unwrap();
    let aerial = aerial_tiles(&spec, &val_seeds, &params, &DomainShiftParams::default()).unwrap();
    let cfg = TrainConfig { batch_size: 8, max_epochs: EPOCHS, seed, ..TrainConfig::default() };
    let out = train(&train_set, &val_set, &ArchitectureConfig::desk(), &cfg, |_, _, _| Ok(())).unwrap();
    let (_, cm_field) = evaluate(&out.model, &val_set, &out.class_weights, 16).unwrap();
    let (_, cm_aerial) = evaluate(&out.model, &aerial, &out.class_weights, 16).unwrap();
    SeedRun {
        field: cm_field.metrics().unwrap().mean_iou,
        aerial: cm_aerial.metrics().unwrap().mean_iou,
        elapsed: t.elapsed(),
        model: out.model,
    }
}

fn c7_cross_domain(runs: &[SeedRun]) -> Outcome {
    let good = runs
        .iter()
        .filter(|r| r.field >= 0.70 && r.aerial >= 0.50 && r.aerial < r.field && r.elapsed <= BUDGET)
        .count();
    let parts: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| format!("seed {}: field {:.3} aerial {:.3} ({:.0}s)", i + 1, r.field, r.aerial, r.elapsed.as_secs_f64()))
        .collect();
    outcome(good >= 2, format!("{good}/3 seeds meet the targets; {}", parts.join("; ")))
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.training.max_epochs = 2;
    cfg.training.seed = 3;
    cfg.mapping.grids = vec![40, 20, 10];
    cfg
}

/// synth, train and predict through the command layer into `dir`.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = small_config();
    commands::synth(&cfg, &dir.join("train"), 24, SynthKind::Field).unwrap();
    cfg.synthetic.seed = 2;
    commands::synth(&cfg, &dir.join("val"), 8, SynthKind::Field).unwrap();
    commands::synth(&cfg, &dir.join("roi"), 1, SynthKind::Roi).unwrap();
    let ckpt = dir.join("model.cfsg");
    commands::train(&cfg, &dir.join("train"), &dir.join("val"), &ckpt).unwrap();
    let out = dir.join("pred");
    let opts = PredictOptions { crf: Some(true), ..Default::default() };
    commands::predict(&cfg, &ckpt, &dir.join("roi/img_00000.png"), &out, &opts).unwrap();
    let mut files = vec![("model.cfsg".to_string(), std::fs::read(&ckpt).unwrap())];
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    for n in names {
        files.push((n.clone(), std::fs::read(out.join(&n)).unwrap()));
    }
    files
}

fn c8_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (pipeline(a.path()), pipeline(b.path()));
    let same = fa.len() == fb.len() && fa.iter().zip(&fb).all(|(x, y)| x == y);

    let model = checkpoint::load(&a.path().join("model.cfsg")).unwrap();
    let again = checkpoint::decode(&checkpoint::encode(&model).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = Tensor::from_fn(Shape::new(2, 3, 64, 64), |_, _, _, _| rng.random());
    let p1 = model.infer(&batch, &[]).unwrap().probabilities;
    let p2 = again.infer(&batch, &[]).unwrap().probabilities;
    let bitwise = p1.data().iter().zip(p2.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    outcome(
        same && bitwise,
        format!(
            "{} artifacts (checkpoint + {} PNGs) {} across two runs; reloaded forward outputs {}",
            fa.len(),
            fa.len() - 1,
            if same { "byte-identical" } else { "differ" },
            if bitwise { "bitwise equal" } else { "differ" }
        ),
    )
}

/// Aerial-style ROI at the training resolution, larger than one tile.
fn fixture_roi(seed: u64) -> ImageRgb {
    let spec = SceneSpec { width: 960, height: 640, crop_rows: 6, seed, ..SceneSpec::default() };
    let (image, _) = synth_scene(&spec).unwrap();
    domain_shift(&resize_bilinear(&image, 240, 160), &DomainShiftParams::default())
}

fn c9_stitching(model: &Model) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut order_ok = true;
    let mut worst: f64 = 0.0;
    for seed in 1..=3 {
        let roi = RegionOfInterest::new(fixture_roi(seed), 1.78).unwrap();
        let plan = TilePlan::new(roi.image.width, roi.image.height, 64, 32).unwrap();
        let base = predict_roi(model, &roi, &plan, None).unwrap();
        for _ in 0..3 {
            let mut shuffled = plan.clone();
            shuffled.origins.shuffle(&mut rng);
            let p = predict_roi(model, &roi, &shuffled, None).unwrap();
            let bitwise = p.mask == base.mask
                && p.probabilities.data().iter().zip(base.probabilities.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            order_ok &= bitwise;
        }
        let plan0 = TilePlan::new(roi.image.width, roi.image.height, 64, 0).unwrap();
        let p0 = predict_roi(model, &roi, &plan0, None).unwrap();
        let differ = p0.mask.data.iter().zip(&base.mask.data).filter(|(a, b)| a != b).count();
        worst = worst.max(differ as f64 / base.mask.data.len() as f64);
    }
    outcome(
        order_ok && worst <= 0.05,
        format!(
            "shuffled tile order {} on 3 ROIs; overlap 32 vs 0 differ on at most {:.2}% of pixels",
            if order_ok { "bitwise identical" } else { "changes the output" },
            100.0 * worst
        ),
    )
}

fn c10_fit() -> (Outcome, Outcome) {
    let collinear: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 3.0 - 2.5 * i as f64)).collect();
    let exact = fit_line(&collinear).unwrap().r_squared == 1.0;

    let pts = [(17.8, 50.40), (8.9, 72.72), (1.78, 91.98)];
    let fit = fit_line(&pts).unwrap();
    // closed-form normal equations
    let n = pts.len() as f64;
    let (sx, sy) = (pts.iter().map(|p| p.0).sum::<f64>(), pts.iter().map(|p| p.1).sum::<f64>());
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let syy: f64 = pts.iter().map(|p| p.1 * p.1).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let r = (n * sxy - sx * sy) / (det * (n * syy - sy * sy)).sqrt();
    let oracle_ok = (fit.slope - slope).abs() < 1e-9 && (fit.r_squared - r * r).abs() < 1e-9;
    let literal = (fit.r_squared - 0.992).abs() <= 0.001;
    (
        outcome(
            exact && oracle_ok,
            format!(
                "collinear R^2 = 1 {}; GTM fit slope {:.4}, R^2 {:.5} vs oracle slope {slope:.4}, R^2 {:.5}",
                if exact { "exactly" } else { "NOT exact" },
                fit.slope,
                fit.r_squared,
                r * r
            ),
        ),
        outcome(
            literal,
            format!("target R^2 0.992 +/- 0.001 on the GTM points; least squares gives {:.5}", fit.r_squared),
        ),
    )
}

fn main() -> ExitCode {
    let t = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    // the stated R^2 contradicts the least-squares oracle it names
    let unattainable = "fit vs stated R^2 0.992";
    results.push((1, "gradient correctness", c1_gradients()));
    results.push((2, "class-weight oracle", c2_class_weights()));
    results.push((3, "spray arithmetic", c3_spray_arithmetic()));
    results.push((4, "ground-area oracle", c4_ground_area()));
    results.push((5, "CRF correctness", c5_crf()));
    results.push((6, "metrics oracle", c6_metrics()));
    let runs: Vec<SeedRun> = (1..=3).map(cross_domain_run).collect();
    results.push((7, "cross-domain replication", c7_cross_domain(&runs)));
    results.push((8, "determinism", c8_determinism()));
    results.push((9, "stitching invariance", c9_stitching(&runs[0].model)));
    let (fit_oracle, fit_literal) = c10_fit();
    results.push((10, "fit vs least-squares oracle", fit_oracle));
    results.push((10, unattainable, fit_literal));

    let mut failed = false;
    for (id, name, o) in &results {
        println!("[{}] criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && *name != unattainable {
            failed = true;
        }
    }
    println!("acceptance finished in {:.0}s", t.elapsed().as_secs_f64());
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
