//! Fully connected CRF over pixel labelings with mean-field inference.
//!
//! The pairwise kernel between pixels `i` and `j` is
//!
//! ```text
//! k(i, j) = w1 * exp(-|p_i - p_j|^2 / 2 sa^2 - |q_i - q_j|^2 / 2 sb^2)
//!         + w2 * exp(-|p_i - p_j|^2 / 2 sr^2)
//! ```
//!
//! with `p` the pixel position and `q` its RGB colour, under a Potts
//! compatibility. Inference evaluates every pair exactly; an optional
//! window radius restricts the sum to nearby pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::imaging::{ImageRgb, LabelMask};
use crate::tensor::Tensor;

pub const PROBABILITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Appearance kernel position scale, in pixels.
    pub sigma_alpha: f64,
    /// Appearance kernel colour scale, colours in [0, 1].
    pub sigma_beta: f64,
    /// Smoothness kernel position scale, in pixels.
    pub sigma_rho: f64,
    pub iterations: usize,
    /// Step size of each update, `Q <- (1 - d) Q + d Q_new`; 1 is the plain
    /// update, which can make strongly coupled pixels swap labels forever.
    pub damping: f64,
    /// Only pixels within this Chebyshev distance interact. `None` is exact.
    pub window: Option<usize>,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w1: 10.0,
            w2: 3.0,
            sigma_alpha: 40.0,
            sigma_beta: 0.13,
            sigma_rho: 3.0,
            iterations: 5,
            damping: 0.3,
            window: None,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1.is_finite() && self.w2.is_finite()) {
            return Err(Error::Config("CRF kernel weights must be finite and >= 0".into()));
        }
        let scales = [self.sigma_alpha, self.sigma_beta, self.sigma_rho];
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("CRF kernel scales must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("CRF damping must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Three times the widest active position scale, rounded up.
    pub fn three_sigma_window(&self) -> usize {
        let mut s: f64 = 0.0;
        if self.w1 > 0.0 {
            s = s.max(self.sigma_alpha);
        }
        if self.w2 > 0.0 {
            s = s.max(self.sigma_rho);
        }
        (3.0 * s).ceil() as usize
    }
}

/// Per-pixel, per-class potentials `-ln P`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl UnaryField {
    pub fn from_vec(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("UnaryField", "len", width * height * classes, data.len())?;
        Ok(Self { width, height, classes, data })
    }

    /// From a `(1, classes, h, w)` probability tensor (or sample `n` of a batch).
    pub fn from_probabilities(probs: &Tensor, n: usize) -> Self {
        let s = probs.shape();
        let (w, h, l) = (s.w, s.h, s.c);
        let mut data = vec![0.0; w * h * l];
        for c in 0..l {
            for (i, &p) in probs.plane(n, c).iter().enumerate() {
                data[i * l + c] = -(p as f64).max(PROBABILITY_FLOOR).ln();
            }
        }
        Self { width: w, height: h, classes: l, data }
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmin(&self) -> LabelMask {
        let data = (0..self.width * self.height).map(|i| argmin(self.pixel(i))).collect();
        LabelMask { width: self.width, height: self.height, data }
    }
}

/// Per-pixel marginals, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QField {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl QField {
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn labels(&self) -> LabelMask {
        let data = (0..self.width * self.height)
            .map(|i| {
                let q = self.pixel(i);
                let mut best = 0;
                for (l, &v) in q.iter().enumerate() {
                    if v > q[best] {
                        best = l;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask { width: self.width, height: self.height, data }
    }
}

fn argmin(v: &[f64]) -> u8 {
    let mut best = 0;
    for (l, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = l;
        }
    }
    best as u8
}

/// Precomputed kernel factors. Position terms separate into x and y tables.
struct Kernel {
    width: usize,
    height: usize,
    w1: f64,
    w2: f64,
    alpha_x: Vec<f64>,
    alpha_y: Vec<f64>,
    rho_x: Vec<f64>,
    rho_y: Vec<f64>,
    /// Colours divided by `sqrt(2) * sigma_beta`.
    colors: Vec<[f64; 3]>,
    window: usize,
}

impl Kernel {
    fn new(image: &ImageRgb, params: &CrfParams) -> Self {
        let table = |n: usize, sigma: f64| -> Vec<f64> {
            (0..n).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect()
        };
        let (w, h) = (image.width, image.height);
        let scale = 1.0 / (2.0f64.sqrt() * params.sigma_beta);
        let colors = (0..w * h)
            .map(|i| {
                let [r, g, b] = image.get(i % w, i / w);
                [r as f64 * scale, g as f64 * scale, b as f64 * scale]
            })
            .collect();
        Self {
            width: w,
            height: h,
            w1: params.w1,
            w2: params.w2,
            alpha_x: table(w, params.sigma_alpha),
            alpha_y: table(h, params.sigma_alpha),
            rho_x: table(w, params.sigma_rho),
            rho_y: table(h, params.sigma_rho),
            colors,
            window: params.window.unwrap_or(usize::MAX),
        }
    }

    #[inline]
    fn eval(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = (i % self.width, i / self.width);
        let (xj, yj) = (j % self.width, j / self.width);
        let (dx, dy) = (xi.abs_diff(xj), yi.abs_diff(yj));
        let mut k = 0.0;
        if self.w1 != 0.0 {
            let (a, b) = (self.colors[i], self.colors[j]);
            let dq = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            k += self.w1 * self.alpha_x[dx] * self.alpha_y[dy] * (-dq).exp();
        }
        if self.w2 != 0.0 {
            k += self.w2 * self.rho_x[dx] * self.rho_y[dy];
        }
        k
    }

    /// Calls `f(j, k(i, j))` for every `j != i` inside the window.
    #[inline]
    fn for_neighbors(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let (xi, yi) = (i % self.width, i / self.width);
        let r = self.window;
        let (x0, x1) = (xi.saturating_sub(r), xi.saturating_add(r).min(self.width - 1));
        let (y0, y1) = (yi.saturating_sub(r), yi.saturating_add(r).min(self.height - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let j = y * self.width + x;
                if j != i {
                    f(j, self.eval(i, j));
                }
            }
        }
    }
}

/// Pairwise kernel value between pixels `i` and `j` (row-major indices).
pub fn pairwise_kernel(image: &ImageRgb, params: &CrfParams, i: usize, j: usize) -> f64 {
    Kernel::new(image, &CrfParams { window: None, ..params.clone() }).eval(i, j)
}

fn check_dims(unary: &UnaryField, image: &ImageRgb) -> Result<()> {
    check_dim("crf", "width", image.width, unary.width)?;
    check_dim("crf", "height", image.height, unary.height)
}

/// Unary sum plus the Potts-weighted kernel over all unordered pairs.
/// Always exact, regardless of `params.window`.
pub fn energy(labeling: &LabelMask, unary: &UnaryField, image: &ImageRgb, params: &CrfParams) -> Result<f64> {
    check_dims(unary, image)?;
    check_dim("crf::energy", "width", unary.width, labeling.width)?;
    check_dim("crf::energy", "height", unary.height, labeling.height)?;
    labeling.validate(unary.classes)?;
    let n = unary.width * unary.height;
    let unary_sum: f64 = (0..n).map(|i| unary.pixel(i)[labeling.data[i] as usize]).sum();
    let kernel = Kernel::new(image, &CrfParams { window: None, ..params.clone() });
    let pairwise: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let li = labeling.data[i];
            ((i + 1)..n)
                .filter(|&j| labeling.data[j] != li)
                .map(|j| kernel.eval(i, j))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(unary_sum + pairwise)
}

fn normalize_exp(neg_energy: &mut [f64]) {
    let max = neg_energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in neg_energy.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in neg_energy.iter_mut() {
        *v /= sum;
    }
}

pub fn mean_field_infer(unary: &UnaryField, image: &ImageRgb, params: &CrfParams) -> Result<(QField, LabelMask)> {
    params.validate()?;
    check_dims(unary, image)?;
    if unary.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("unary potentials must be finite".into()));
    }
    let l = unary.classes;
    let mut q = QField {
        width: unary.width,
        height: unary.height,
        classes: l,
        data: unary.data.iter().map(|u| -u).collect(),
    };
    q.data.chunks_mut(l).for_each(normalize_exp);
    if params.iterations == 0 || (params.w1 == 0.0 && params.w2 == 0.0) {
        let labels = q.labels();
        return Ok((q, labels));
    }
    let kernel = Kernel::new(image, params);
    let mut next = vec![0.0; q.data.len()];
    let d = params.damping;
    for _ in 0..params.iterations {
        let old = &q.data;
        next.par_chunks_mut(l).enumerate().for_each(|(i, out)| {
            // message(l) = sum_j k(i,j) * (1 - Q_j(l))
            let mut total = 0.0;
            out.fill(0.0);
            kernel.for_neighbors(i, |j, k| {
                total += k;
                for (o, qj) in out.iter_mut().zip(&old[j * l..(j + 1) * l]) {
                    *o += k * qj;
                }
            });
            for (o, u) in out.iter_mut().zip(unary.pixel(i)) {
                *o = -u - (total - *o);
            }
            normalize_exp(out);
            if d < 1.0 {
                for (o, qi) in out.iter_mut().zip(&old[i * l..(i + 1) * l]) {
                    *o = (1.0 - d) * qi + d * *o;
                }
            }
        });
        std::mem::swap(&mut q.data, &mut next);
    }
    let labels = q.labels();
    Ok((q, labels))
}

/// Mean-field refinement of sample `n` of a probability tensor.
pub fn refine(probabilities: &Tensor, n: usize, image: &ImageRgb, params: &CrfParams) -> Result<LabelMask> {
    let s = probabilities.shape();
    check_dim("crf::refine", "width", image.width, s.w)?;
    check_dim("crf::refine", "height", image.height, s.h)?;
    let unary = UnaryField::from_probabilities(probabilities, n);
    Ok(mean_field_infer(&unary, image, params)?.1)
}

/// One-hot probability tensor `(1, classes, h, w)` of a hard labeling.
pub fn one_hot(mask: &LabelMask, classes: usize) -> Tensor {
    use crate::tensor::Shape;
    Tensor::from_fn(Shape::new(1, classes, mask.height, mask.width), |_, c, y, x| {
        f32::from(mask.get(x, y) as usize == c)
    })
}
