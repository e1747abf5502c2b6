use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{check_dim, Result};

pub const DEFAULT_EPSILON: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch-norm parameters and running statistics.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub fn batch_norm(input: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => batch_norm_train(input, state).map(|(out, _)| out),
        Mode::Infer => batch_norm_infer(input, state),
    }
}

pub fn batch_norm_infer(input: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    let s = input.shape();
    check_dim("batch_norm", "C", state.channels(), s.c)?;
    let plane = s.plane();
    let mut out = input.clone();
    let data = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = state.gamma[c] / (state.running_var[c] + state.epsilon).sqrt();
            let shift = state.beta[c] - state.running_mean[c] * scale;
            let start = (n * s.c + c) * plane;
            for v in &mut data[start..start + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Normalizes with batch statistics over N, H, W and folds them into the
/// running averages. Statistics are accumulated in f64 in a fixed order.
pub fn batch_norm_train(
    input: &Tensor,
    state: &mut BatchNormState,
) -> Result<(Tensor, BatchNormCache)> {
    let s = input.shape();
    check_dim("batch_norm", "C", state.channels(), s.c)?;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += input.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + state.epsilon as f64).sqrt();
        inv_std[c] = istd as f32;
        let (g, b) = (state.gamma[c], state.beta[c]);
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            let src = &input.data()[start..start + plane];
            let xh = &mut normalized.data_mut()[start..start + plane];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = ((v as f64 - mean) * istd) as f32;
            }
            let dst = &mut out.data_mut()[start..start + plane];
            for (d, &v) in dst.iter_mut().zip(&normalized.data()[start..start + plane]) {
                *d = g * v + b;
            }
        }
        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
        let m = state.momentum;
        state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * mean as f32;
        state.running_var[c] = m * state.running_var[c] + (1.0 - m) * unbiased as f32;
    }
    Ok((out, BatchNormCache { normalized, inv_std }))
}

pub fn batch_norm_grad(
    cache: &BatchNormCache,
    gamma: &[f32],
    upstream: &Tensor,
) -> Result<BatchNormGrads> {
    let s: Shape = upstream.shape();
    let xh = &cache.normalized;
    check_dim("batch_norm_grad", "upstream N", xh.shape().n, s.n)?;
    check_dim("batch_norm_grad", "upstream C", xh.shape().c, s.c)?;
    check_dim("batch_norm_grad", "upstream H", xh.shape().h, s.h)?;
    check_dim("batch_norm_grad", "upstream W", xh.shape().w, s.w)?;
    check_dim("batch_norm_grad", "gamma length", s.c, gamma.len())?;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut grad_in = Tensor::zeros(s);
    let mut ggamma = vec![0.0f32; s.c];
    let mut gbeta = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for n in 0..s.n {
            for (&dy, &x) in upstream.plane(n, c).iter().zip(xh.plane(n, c)) {
                sum_dy += dy as f64;
                sum_dy_xh += dy as f64 * x as f64;
            }
        }
        gbeta[c] = sum_dy as f32;
        ggamma[c] = sum_dy_xh as f32;
        let mean_dy = sum_dy / count;
        let mean_dy_xh = sum_dy_xh / count;
        let scale = gamma[c] as f64 * cache.inv_std[c] as f64;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            let dy = &upstream.data()[start..start + plane];
            let x = &xh.data()[start..start + plane];
            let dst = &mut grad_in.data_mut()[start..start + plane];
            for ((d, &g), &xv) in dst.iter_mut().zip(dy).zip(x) {
                *d = (scale * (g as f64 - mean_dy - xv as f64 * mean_dy_xh)) as f32;
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_in,
        gamma: ggamma,
        beta: gbeta,
    })
}
