//! Dense NCHW tensors and the layer kernels the segmentation network is
//! built from. Every differentiable kernel has a hand-derived gradient next
//! to it; there is no autograd graph.

mod conv;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_grad, conv2d_with, ConvGrads, ConvPath};
pub use norm::{
    batch_norm, batch_norm_grad, batch_norm_infer, batch_norm_train, BatchNormCache,
    BatchNormGrads, BatchNormState, Mode,
};
pub use pool::{max_pool_2x2, max_pool_2x2_grad, max_unpool_2x2, max_unpool_2x2_grad, PoolIndices};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_dim("Tensor::from_vec", "data length", shape.len(), data.len())?;
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `C*H*W` slice of one batch item.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Contiguous `H*W` slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Copies batch items `[start, start + count)` into a new tensor.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Self {
        let len = self.shape.c * self.shape.plane();
        Self {
            shape: Shape { n: count, ..self.shape },
            data: self.data[start * len..(start + count) * len].to_vec(),
        }
    }

    /// Stacks single items (or batches) along N. All inputs must agree on C, H, W.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape {
                op: "Tensor::stack",
                msg: "no tensors to stack".into(),
            })?
            .shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            check_dim("Tensor::stack", "C", first.c, t.shape.c)?;
            check_dim("Tensor::stack", "H", first.h, t.shape.h)?;
            check_dim("Tensor::stack", "W", first.w, t.shape.w)?;
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Self {
            shape: Shape { n, ..first },
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_grad(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("relu_grad", input.shape, upstream.shape)?;
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape,
        data,
    })
}

/// Joins `a` and `b` along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape, b.shape);
    check_dim("concat_channels", "N", sa.n, sb.n)?;
    check_dim("concat_channels", "H", sa.h, sb.h)?;
    check_dim("concat_channels", "W", sa.w, sb.w)?;
    let out_shape = sa.with_c(sa.c + sb.c);
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data[n * lb..(n + 1) * lb]);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Inverse of [`concat_channels`]: routes a gradient back to its two inputs.
pub fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let s = t.shape;
    if first > s.c {
        return Err(Error::Shape {
            op: "split_channels",
            dim: "C",
            expected: s.c,
            found: first,
        });
    }
    let (sa, sb) = (s.with_c(first), s.with_c(s.c - first));
    let (la, lb) = (sa.c * s.plane(), sb.c * s.plane());
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let base = n * (la + lb);
        a.extend_from_slice(&t.data[base..base + la]);
        b.extend_from_slice(&t.data[base + la..base + la + lb]);
    }
    Ok((Tensor { shape: sa, data: a }, Tensor { shape: sb, data: b }))
}

/// Per-pixel softmax over the channel axis, stabilised by subtracting the
/// per-pixel maximum.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape;
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(logits.data[base + c * plane + p]);
            }
            let mut sum = 0.0f32;
            for c in 0..s.c {
                let e = (logits.data[base + c * plane + p] - max).exp();
                out.data[base + c * plane + p] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for c in 0..s.c {
                out.data[base + c * plane + p] *= inv;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties resolve to the lowest channel.
pub fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let s = t.shape;
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = t.data[base + p];
            for c in 1..s.c {
                let v = t.data[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    check_dim(op, "N", a.n, b.n)?;
    check_dim(op, "C", a.c, b.c)?;
    check_dim(op, "H", a.h, b.h)?;
    check_dim(op, "W", a.w, b.w)
}
