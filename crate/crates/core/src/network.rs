//! The encoder-decoder segmentation network: five conv+pool encoder stages,
//! five index-unpool+conv decoder stages with optional skip concatenation,
//! and a softmax classifier at input resolution.
//!
//! Layer naming: convolutions are `conv1`..`conv29` in execution order,
//! pooling layers `pool1`..`pool5`, and `unpoolK` is the upsampling layer
//! that consumes the indices of `poolK` (so decoding runs `unpool5` first).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayRaster, ImageRgb};
use crate::tensor::{
    self, batch_norm_grad, batch_norm_infer, batch_norm_train, concat_channels, conv2d,
    conv2d_grad, max_pool_2x2, max_pool_2x2_grad, max_unpool_2x2, max_unpool_2x2_grad, relu,
    relu_grad, softmax_channels, split_channels, BatchNormCache, BatchNormState, Mode,
    PoolIndices, Shape, Tensor,
};

pub const STAGES: usize = 5;
pub const ENCODER_CONVS: usize = 14;
pub const DECODER_CONVS: usize = 15;
/// Spatial dims must be divisible by this (five 2x halvings).
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    /// Output channels of each encoder stage.
    pub stage_widths: [usize; STAGES],
    pub convs_per_encoder_stage: [usize; STAGES],
    /// In decoding order (deepest resolution first). The last stage's final
    /// conv emits class logits.
    pub convs_per_decoder_stage: [usize; STAGES],
    pub num_classes: usize,
    pub skip_connections: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchitectureConfig {
    pub fn full() -> Self {
        Self {
            stage_widths: [64, 128, 256, 512, 512],
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            stage_widths: [8, 16, 32, 32, 32],
            convs_per_encoder_stage: [2, 2, 3, 3, 4],
            convs_per_decoder_stage: [4, 3, 3, 2, 3],
            num_classes: 3,
            skip_connections: true,
        }
    }

    pub fn with_widths(widths: [usize; STAGES]) -> Self {
        Self {
            stage_widths: widths,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_widths.contains(&0) {
            return bad("stage widths must be positive".into());
        }
        if self.convs_per_encoder_stage.contains(&0) || self.convs_per_decoder_stage.contains(&0) {
            return bad("every stage needs at least one conv".into());
        }
        let enc: usize = self.convs_per_encoder_stage.iter().sum();
        let dec: usize = self.convs_per_decoder_stage.iter().sum();
        if enc != ENCODER_CONVS {
            return bad(format!("encoder conv counts sum to {enc}, expected {ENCODER_CONVS}"));
        }
        if dec != DECODER_CONVS {
            return bad(format!("decoder conv counts sum to {dec}, expected {DECODER_CONVS}"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    /// `(cin, cout, has_batch_norm)` for conv1..conv29.
    pub fn conv_plan(&self) -> Vec<(usize, usize, bool)> {
        let w = &self.stage_widths;
        let mut plan = Vec::with_capacity(ENCODER_CONVS + DECODER_CONVS);
        let mut cur = 3;
        for s in 0..STAGES {
            for _ in 0..self.convs_per_encoder_stage[s] {
                plan.push((cur, w[s], true));
                cur = w[s];
            }
        }
        for (d, &count) in self.convs_per_decoder_stage.iter().enumerate() {
            let s = STAGES - 1 - d;
            if self.skip_connections {
                cur += w[s];
            }
            for j in 0..count {
                let last = j + 1 == count;
                let out = match (last, s) {
                    (true, 0) => self.num_classes,
                    (true, _) => w[s - 1],
                    _ => w[s],
                };
                plan.push((cur, out, !(last && s == 0)));
                cur = out;
            }
        }
        plan
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=ENCODER_CONVS + DECODER_CONVS)
            .map(|k| format!("conv{k}"))
            .collect();
        names.extend((1..=STAGES).map(|s| format!("pool{s}")));
        names.extend((1..=STAGES).map(|s| format!("unpool{s}")));
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub bn: Option<BatchNormState>,
}

/// A named flat parameter block with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ArchitectureConfig,
    convs: Vec<ConvLayer>,
    seed: u64,
}

#[derive(Debug)]
struct LayerCache {
    input: Tensor,
    bn: Option<BatchNormCache>,
    output: Tensor,
}

#[derive(Debug)]
struct TrainCache {
    layers: Vec<LayerCache>,
    indices: Vec<PoolIndices>,
    /// Channels coming out of each unpool before the skip is appended, by stage.
    unpooled_channels: [usize; STAGES],
}

#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub named_activations: Vec<(String, Tensor)>,
    cache: Option<TrainCache>,
}

impl ForwardTrace {
    pub fn activation(&self, name: &str) -> Option<&Tensor> {
        self.named_activations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn is_train(&self) -> bool {
        self.cache.is_some()
    }

    /// Max-pool switches of a train-mode pass, `pool1` first.
    pub fn pool_indices(&self) -> Option<&[PoolIndices]> {
        self.cache.as_ref().map(|c| c.indices.as_slice())
    }
}

/// Gradients keyed exactly like [`Model::trainable_parameters`].
pub type Gradients = Vec<NamedTensor>;

fn check_input(config: &ArchitectureConfig, batch: &Tensor) -> Result<()> {
    let s = batch.shape();
    crate::error::check_dim("forward", "input channels", 3, s.c)?;
    if s.h == 0 || s.w == 0 || s.h % SIZE_MULTIPLE != 0 || s.w % SIZE_MULTIPLE != 0 {
        return Err(Error::InvalidShape {
            op: "forward",
            msg: format!("spatial dims {}x{} must be positive multiples of {SIZE_MULTIPLE}", s.h, s.w),
        });
    }
    config.validate()
}

impl Model {
    /// He-normal conv weights, zero biases, identity batch norm.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = config
            .conv_plan()
            .into_iter()
            .map(|(cin, cout, bn)| {
                let std = (2.0 / (cin * 9) as f64).sqrt() as f32;
                let normal = Normal::new(0.0f32, std).expect("std is finite and positive");
                let shape = Shape::new(cout, cin, 3, 3);
                let data = (0..shape.len()).map(|_| normal.sample(&mut rng)).collect();
                ConvLayer {
                    weight: Tensor::from_vec(shape, data).expect("length matches shape"),
                    bias: vec![0.0; cout],
                    bn: bn.then(|| BatchNormState::new(cout)),
                }
            })
            .collect();
        Ok(Self { config, convs, seed })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.convs
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut trainable = 0;
        let mut non_trainable = 0;
        for c in &self.convs {
            trainable += c.weight.len() + c.bias.len();
            if let Some(bn) = &c.bn {
                trainable += bn.gamma.len() + bn.beta.len();
                non_trainable += bn.running_mean.len() + bn.running_var.len();
            }
        }
        ParameterCount {
            trainable,
            non_trainable,
            total: trainable + non_trainable,
        }
    }

    pub fn trainable_parameters(&self) -> Vec<NamedTensor> {
        self.parameters()
            .into_iter()
            .filter(|p| !p.name.contains(".running_"))
            .collect()
    }

    /// Every parameter block, trainable and running statistics, in canonical order.
    pub fn parameters(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (k, c) in self.convs.iter().enumerate() {
            let p = format!("conv{}", k + 1);
            out.push(NamedTensor {
                name: format!("{p}.weight"),
                shape: c.weight.shape().dims().to_vec(),
                data: c.weight.data().to_vec(),
            });
            out.push(NamedTensor {
                name: format!("{p}.bias"),
                shape: vec![c.bias.len()],
                data: c.bias.clone(),
            });
            if let Some(bn) = &c.bn {
                for (suffix, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    out.push(NamedTensor {
                        name: format!("{p}.bn.{suffix}"),
                        shape: vec![v.len()],
                        data: v.clone(),
                    });
                }
            }
        }
        out
    }

    /// Mutable views of the trainable blocks in the order of [`Model::trainable_parameters`].
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weight.data_mut());
            out.push(&mut c.bias);
            if let Some(bn) = &mut c.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Overwrites every parameter block from `params`, which must name and
    /// shape exactly the blocks of [`Model::parameters`].
    pub fn load_parameters(&mut self, params: &[NamedTensor]) -> Result<()> {
        let expected = self.parameters();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter records, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(params) {
            if e.name != p.name || e.shape != p.shape || p.data.len() != e.data.len() {
                return Err(Error::Checkpoint(format!(
                    "record `{}` {:?} does not match expected `{}` {:?}",
                    p.name, p.shape, e.name, e.shape
                )));
            }
        }
        let mut it = params.iter();
        let mut next = || it.next().expect("length checked").data.clone();
        for c in &mut self.convs {
            let shape = c.weight.shape();
            c.weight = Tensor::from_vec(shape, next())?;
            c.bias = next();
            if let Some(bn) = &mut c.bn {
                bn.gamma = next();
                bn.beta = next();
                bn.running_mean = next();
                bn.running_var = next();
            }
        }
        Ok(())
    }

    /// Runs the network. Train mode uses batch statistics, updates running
    /// statistics and keeps the intermediates needed by [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, capture: &[&str]) -> Result<ForwardTrace> {
        match mode {
            Mode::Infer => self.infer(batch, capture),
            Mode::Train => {
                let mut updates = Vec::new();
                let trace = self.run(batch, capture, Some(&mut updates))?;
                for (k, state) in updates {
                    self.convs[k].bn = Some(state);
                }
                Ok(trace)
            }
        }
    }

    /// Inference-mode forward; safe to call concurrently.
    pub fn infer(&self, batch: &Tensor, capture: &[&str]) -> Result<ForwardTrace> {
        self.run(batch, capture, None)
    }

    /// `bn_updates` is `Some` in train mode and collects the batch-norm states
    /// with refreshed running statistics.
    fn run(
        &self,
        batch: &Tensor,
        capture: &[&str],
        mut bn_updates: Option<&mut Vec<(usize, BatchNormState)>>,
    ) -> Result<ForwardTrace> {
        let train = bn_updates.is_some();
        check_input(&self.config, batch)?;
        for name in capture {
            if !self.config.layer_names().iter().any(|n| n == name) {
                return Err(Error::UnknownLayer((*name).to_string()));
            }
        }
        let mut captured = Vec::new();
        let mut keep = |name: String, t: &Tensor| {
            if capture.contains(&name.as_str()) {
                captured.push((name, t.clone()));
            }
        };

        let mut layers = Vec::new();
        let mut indices = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);
        let mut unpooled_channels = [0; STAGES];
        let mut k = 0;
        let mut x = batch.clone();

        for s in 0..STAGES {
            for _ in 0..self.config.convs_per_encoder_stage[s] {
                x = self.conv_block(k, x, bn_updates.as_deref_mut(), &mut layers)?;
                k += 1;
                keep(format!("conv{k}"), &x);
            }
            let (pooled, idx) = max_pool_2x2(&x)?;
            if self.config.skip_connections {
                skips.push(x);
            }
            x = pooled;
            keep(format!("pool{}", s + 1), &x);
            indices.push(idx);
        }
        for d in 0..STAGES {
            let s = STAGES - 1 - d;
            x = max_unpool_2x2(&x, &indices[s])?;
            keep(format!("unpool{}", s + 1), &x);
            unpooled_channels[s] = x.shape().c;
            if self.config.skip_connections {
                x = concat_channels(&x, &skips[s])?;
            }
            for _ in 0..self.config.convs_per_decoder_stage[d] {
                x = self.conv_block(k, x, bn_updates.as_deref_mut(), &mut layers)?;
                k += 1;
                keep(format!("conv{k}"), &x);
            }
        }
        let probabilities = softmax_channels(&x);
        Ok(ForwardTrace {
            logits: x,
            probabilities,
            named_activations: captured,
            cache: train.then_some(TrainCache {
                layers,
                indices,
                unpooled_channels,
            }),
        })
    }

    fn conv_block(
        &self,
        k: usize,
        input: Tensor,
        bn_updates: Option<&mut Vec<(usize, BatchNormState)>>,
        layers: &mut Vec<LayerCache>,
    ) -> Result<Tensor> {
        let layer = &self.convs[k];
        let train = bn_updates.is_some();
        let z = conv2d(&input, &layer.weight, &layer.bias)?;
        let (out, bn_cache) = match (&layer.bn, bn_updates) {
            (None, _) => (z, None),
            (Some(bn), None) => (relu(&batch_norm_infer(&z, bn)?), None),
            (Some(bn), Some(updates)) => {
                let mut state = bn.clone();
                let (normed, cache) = batch_norm_train(&z, &mut state)?;
                updates.push((k, state));
                (relu(&normed), Some(cache))
            }
        };
        if train {
            layers.push(LayerCache {
                input,
                bn: bn_cache,
                output: out.clone(),
            });
        }
        Ok(out)
    }

    /// Gradients of a scalar loss for every trainable parameter, given the
    /// loss gradient with respect to the logits of a train-mode trace.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<Gradients> {
        let cache = trace.cache.as_ref().ok_or_else(|| {
            Error::Config("backward requires a trace produced in train mode".into())
        })?;
        let n_convs = self.convs.len();
        let mut grads: Vec<Option<LayerGrads>> = (0..n_convs).map(|_| None).collect();
        let mut k = n_convs;
        let mut g = grad_logits.clone();
        let mut skip_grads: Vec<Option<Tensor>> = (0..STAGES).map(|_| None).collect();

        for d in (0..STAGES).rev() {
            let s = STAGES - 1 - d;
            for _ in 0..self.config.convs_per_decoder_stage[d] {
                k -= 1;
                let (gi, lg) = self.conv_block_backward(k, &cache.layers[k], g)?;
                grads[k] = Some(lg);
                g = gi;
            }
            if self.config.skip_connections {
                let (gu, gs) = split_channels(&g, cache.unpooled_channels[s])?;
                skip_grads[s] = Some(gs);
                g = gu;
            }
            g = max_unpool_2x2_grad(&g, &cache.indices[s])?;
        }
        for s in (0..STAGES).rev() {
            g = max_pool_2x2_grad(&g, &cache.indices[s])?;
            if let Some(gs) = skip_grads[s].take() {
                for (a, b) in g.data_mut().iter_mut().zip(gs.data()) {
                    *a += b;
                }
            }
            for _ in 0..self.config.convs_per_encoder_stage[s] {
                k -= 1;
                let (gi, lg) = self.conv_block_backward(k, &cache.layers[k], g)?;
                grads[k] = Some(lg);
                g = gi;
            }
        }

        let mut out = Vec::new();
        for (k, lg) in grads.into_iter().enumerate() {
            let lg = lg.expect("every conv visited");
            let p = format!("conv{}", k + 1);
            out.push(NamedTensor {
                name: format!("{p}.weight"),
                shape: lg.weight.shape().dims().to_vec(),
                data: lg.weight.into_data(),
            });
            out.push(NamedTensor {
                name: format!("{p}.bias"),
                shape: vec![lg.bias.len()],
                data: lg.bias,
            });
            if let Some((gamma, beta)) = lg.bn {
                out.push(NamedTensor {
                    name: format!("{p}.bn.gamma"),
                    shape: vec![gamma.len()],
                    data: gamma,
                });
                out.push(NamedTensor {
                    name: format!("{p}.bn.beta"),
                    shape: vec![beta.len()],
                    data: beta,
                });
            }
        }
        Ok(out)
    }

    fn conv_block_backward(
        &self,
        k: usize,
        cache: &LayerCache,
        upstream: Tensor,
    ) -> Result<(Tensor, LayerGrads)> {
        let layer = &self.convs[k];
        let (g, bn) = match (&layer.bn, &cache.bn) {
            (Some(state), Some(bn_cache)) => {
                let g = relu_grad(&cache.output, &upstream)?;
                let bg = batch_norm_grad(bn_cache, &state.gamma, &g)?;
                (bg.input, Some((bg.gamma, bg.beta)))
            }
            _ => (upstream, None),
        };
        let cg = conv2d_grad(&cache.input, &layer.weight, &g)?;
        Ok((
            cg.input,
            LayerGrads {
                weight: cg.weights,
                bias: cg.bias,
                bn,
            },
        ))
    }

    /// One min-max normalized raster per channel of `layer_name`, for the
    /// first image of the batch.
    pub fn extract_feature_maps(&self, image: &ImageRgb, layer_name: &str) -> Result<Vec<GrayRaster>> {
        let input = image.to_tensor();
        let trace = self.infer(&input, &[layer_name])?;
        let act = trace
            .activation(layer_name)
            .ok_or_else(|| Error::UnknownLayer(layer_name.to_string()))?;
        let s = act.shape();
        Ok((0..s.c)
            .map(|c| GrayRaster::normalized(s.w, s.h, act.plane(0, c)))
            .collect())
    }
}

struct LayerGrads {
    weight: Tensor,
    bias: Vec<f32>,
    bn: Option<(Vec<f32>, Vec<f32>)>,
}

/// Per-pixel class ids from a probability (or logit) tensor.
pub fn predict_labels(probabilities: &Tensor) -> Vec<u8> {
    tensor::argmax_channels(probabilities)
}
