//! Weighted cross-entropy, class weighting from pixel frequencies, Adam with
//! a plateau learning-rate schedule, mask-safe augmentation, and the
//! mini-batch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::imaging::{flip_horizontal, flip_vertical, gamma_correct, rotate_90, ImageRgb, LabelMask};
use crate::network::{ArchitectureConfig, Model, SIZE_MULTIPLE};
use crate::tensor::{Mode, Shape, Tensor};

/// Probabilities are floored here before taking logs.
const PROB_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f32>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    /// `W_c = max(1, ln(max_i P_i / P_c))`.
    pub fn from_pixel_counts(counts: &[u64]) -> Result<Self> {
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass { class });
        }
        let max = *counts.iter().max().ok_or_else(|| Error::Data("no classes".into()))? as f64;
        Ok(Self(
            counts
                .iter()
                .map(|&c| (max / c as f64).ln().max(1.0) as f32)
                .collect(),
        ))
    }

    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a LabelMask>, classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; classes];
        for m in masks {
            m.validate(classes)?;
            for (acc, c) in counts.iter_mut().zip(m.histogram(classes)) {
                *acc += c;
            }
        }
        Self::from_pixel_counts(&counts)
    }
}

/// Weighted pixel-mean cross-entropy and its gradient with respect to the
/// logits that produced `probabilities` through a channel softmax.
///
/// `labels` holds one class id per pixel in N, H, W order.
pub fn weighted_cross_entropy(
    probabilities: &Tensor,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<(f32, Tensor)> {
    let s = probabilities.shape();
    let plane = s.plane();
    check_dim("weighted_cross_entropy", "label count", s.n * plane, labels.len())?;
    check_dim("weighted_cross_entropy", "class weights", s.c, weights.0.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= s.c) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: s.c,
        });
    }
    let pixels = (s.n * plane) as f64;
    let inv = (1.0 / pixels) as f32;
    let mut loss = 0.0f64;
    let mut grad = probabilities.clone();
    let p = probabilities.data();
    let g = grad.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let y = labels[n * plane + i] as usize;
            let w = weights.0[y];
            let py = p[base + y * plane + i].max(PROB_FLOOR);
            loss -= w as f64 * (py as f64).ln();
            for c in 0..s.c {
                let idx = base + c * plane + i;
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[idx] = w * inv * (p[idx] - onehot);
            }
        }
    }
    Ok(((loss / pixels) as f32, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter block.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut AdamState, lr: f32) -> Result<()> {
    check_dim("adam_step", "gradient blocks", params.len(), grads.len())?;
    check_dim("adam_step", "moment blocks", params.len(), state.m.len())?;
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        check_dim("adam_step", "block length", p.len(), g.len())?;
        check_dim("adam_step", "moment length", p.len(), m.len())?;
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f32,
    pub tolerance: f32,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.1,
            tolerance: 1e-4,
        }
    }
}

/// Multiplies the learning rate by `factor` once the batch loss has stayed
/// within `tolerance` of its best value for `patience` consecutive batches.
/// The batch that sets a new best starts the run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub current_lr: f32,
    pub config: PlateauConfig,
    pub stall_counter: usize,
    pub best: Option<f32>,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f32, config: PlateauConfig) -> Self {
        Self {
            current_lr: initial_lr,
            config,
            stall_counter: 0,
            best: None,
        }
    }

    pub fn update(&mut self, loss: f32) {
        let tol = self.config.tolerance;
        match self.best {
            None => {
                self.best = Some(loss);
                self.stall_counter = 1;
            }
            Some(best) if (loss - best).abs() <= tol => self.stall_counter += 1,
            Some(best) if loss < best => {
                self.best = Some(loss);
                self.stall_counter = 1;
            }
            Some(_) => self.stall_counter = 0,
        }
        if self.stall_counter >= self.config.patience {
            self.current_lr *= self.config.factor;
            self.stall_counter = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotate_90: bool,
    pub gamma_jitter: bool,
    pub gamma_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            rotate_90: true,
            gamma_jitter: true,
            gamma_range: (0.7, 1.3),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotate_90: false,
            gamma_jitter: false,
            ..Self::default()
        }
    }
}

/// Applies an independently sampled subset of the enabled transforms.
/// Geometry is shared by image and mask; gamma touches the image only.
pub fn augment(
    image: &ImageRgb,
    mask: &LabelMask,
    rng: &mut impl Rng,
    config: &AugmentConfig,
) -> (ImageRgb, LabelMask) {
    let (mut img, mut m) = (image.clone(), mask.clone());
    if config.horizontal_flip && rng.random_bool(0.5) {
        img.data = flip_horizontal(&img.data, img.width, img.height, 3);
        m.data = flip_horizontal(&m.data, m.width, m.height, 1);
    }
    if config.vertical_flip && rng.random_bool(0.5) {
        img.data = flip_vertical(&img.data, img.width, img.height, 3);
        m.data = flip_vertical(&m.data, m.width, m.height, 1);
    }
    if config.rotate_90 {
        for _ in 0..rng.random_range(0..4) {
            img.data = rotate_90(&img.data, img.width, img.height, 3);
            m.data = rotate_90(&m.data, m.width, m.height, 1);
            std::mem::swap(&mut img.width, &mut img.height);
            std::mem::swap(&mut m.width, &mut m.height);
        }
    }
    if config.gamma_jitter {
        let (lo, hi) = config.gamma_range;
        let g = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        img = gamma_correct(&img, g);
    }
    (img, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageRgb,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f32,
    pub max_epochs: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    /// `None` derives weights from the training masks.
    pub class_weights: Option<Vec<f32>>,
    pub plateau: PlateauConfig,
    /// Stop after this many epochs without validation-loss improvement.
    pub early_stopping: usize,
    /// Stop starting new epochs once this many seconds have elapsed.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            initial_lr: 0.005,
            max_epochs: 30,
            seed: 0,
            augmentation: AugmentConfig::default(),
            class_weights: None,
            plateau: PlateauConfig::default(),
            early_stopping: 5,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_miou: f64,
    pub lr: f32,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_miou,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub class_weights: ClassWeights,
    pub best_epoch: usize,
}

/// RNG for one (epoch, sample) pair, independent of visitation order.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a06e_0000_0000);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn batch_tensors(samples: &[(ImageRgb, LabelMask)]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = samples.iter().map(|(i, _)| i.to_tensor()).collect();
    let labels = samples.iter().flat_map(|(_, m)| m.data.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

fn check_dataset(name: &str, data: &[Sample], classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{name} dataset is empty")));
    }
    for s in data {
        if (s.image.width, s.image.height) != (s.mask.width, s.mask.height) {
            return Err(Error::Data(format!("{name}: image and mask dims differ")));
        }
        if s.image.width % SIZE_MULTIPLE != 0 || s.image.height % SIZE_MULTIPLE != 0 {
            return Err(Error::Data(format!(
                "{name}: tile {}x{} not divisible by {SIZE_MULTIPLE}",
                s.image.width, s.image.height
            )));
        }
        s.mask.validate(classes)?;
    }
    Ok(())
}

/// Validation loss and confusion matrix in inference mode.
pub fn evaluate(
    model: &Model,
    data: &[Sample],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<(f32, ConfusionMatrix)> {
    let classes = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut loss_sum = 0.0f64;
    let mut pixels = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let pairs: Vec<(ImageRgb, LabelMask)> =
            chunk.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
        let (x, labels) = batch_tensors(&pairs)?;
        let trace = model.infer(&x, &[])?;
        let (loss, _) = weighted_cross_entropy(&trace.probabilities, &labels, weights)?;
        loss_sum += loss as f64 * labels.len() as f64;
        pixels += labels.len();
        let pred = crate::tensor::argmax_channels(&trace.probabilities);
        let plane = x.shape().plane();
        for (i, s) in chunk.iter().enumerate() {
            let p = LabelMask::from_vec(s.mask.width, s.mask.height, pred[i * plane..(i + 1) * plane].to_vec())?;
            cm.accumulate(&p, &s.mask)?;
        }
    }
    Ok(((loss_sum / pixels as f64) as f32, cm))
}

/// Trains a fresh model. `on_epoch` sees every epoch's record, the current
/// model, and whether it is the best so far (for checkpointing).
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    let classes = arch.num_classes;
    check_dataset("training", train_set, classes)?;
    check_dataset("validation", val_set, classes)?;
    let weights = match &config.class_weights {
        Some(w) => {
            check_dim("train", "class weights", classes, w.len())?;
            ClassWeights(w.clone())
        }
        None => ClassWeights::from_masks(train_set.iter().map(|s| &s.mask), classes)?,
    };

    let mut model = Model::build(arch.clone(), config.seed)?;
    let sizes = model.trainable_parameters().into_iter().map(|p| p.data.len());
    let mut adam = AdamState::new(sizes);
    let mut schedule = PlateauSchedule::new(config.initial_lr, config.plateau.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut best: Option<(f32, Model, usize)> = None;
    let mut since_best = 0;
    let started = std::time::Instant::now();

    for epoch in 1..=config.max_epochs {
        if let Some(budget) = config.time_budget_secs {
            if epoch > 1 && started.elapsed().as_secs_f64() >= budget {
                break;
            }
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<(ImageRgb, LabelMask)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = sample_rng(config.seed, epoch, i);
                    augment(&s.image, &s.mask, &mut rng, &config.augmentation)
                })
                .collect();
            let (x, labels) = batch_tensors(&pairs)?;
            let trace = model.forward(&x, Mode::Train, &[])?;
            let (loss, grad) = weighted_cross_entropy(&trace.probabilities, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            let grads = model.backward(&trace, &grad)?;
            drop(trace);
            let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.data.as_slice()).collect();
            let lr = schedule.current_lr;
            adam_step(&mut model.trainable_slices_mut(), &grad_slices, &mut adam, lr)?;
            schedule.update(loss);
            loss_sum += loss as f64;
            batches += 1;
        }
        let (val_loss, cm) = evaluate(&model, val_set, &weights, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: batches, loss: val_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: (loss_sum / batches as f64) as f32,
            val_loss,
            val_miou: cm.metrics()?.mean_iou,
            lr: schedule.current_lr,
        };
        let improved = best.as_ref().is_none_or(|(l, _, _)| val_loss < *l);
        if improved {
            best = Some((val_loss, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        on_epoch(&record, &model, improved)?;
        history.push(record);
        if since_best >= config.early_stopping {
            break;
        }
    }
    let (_, model, best_epoch) = best.ok_or_else(|| Error::Config("max_epochs must be >= 1".into()))?;
    Ok(TrainOutcome {
        model,
        history,
        class_weights: weights,
        best_epoch,
    })
}

/// Labels of a batch of masks in N, H, W order.
pub fn flatten_labels(masks: &[LabelMask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data.iter().copied()).collect()
}

pub fn stack_images(images: &[ImageRgb]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("no images".into()))?;
    let shape = Shape::new(images.len(), 3, first.height, first.width);
    let mut data = Vec::with_capacity(shape.len());
    for img in images {
        if (img.width, img.height) != (first.width, first.height) {
            return Err(Error::Data("images in a batch must share dims".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(shape, data)
}
