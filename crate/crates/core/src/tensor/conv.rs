//! 3x3, stride 1, zero-padding 1 convolution.
//!
//! Two evaluation paths: a direct loop and an im2col + GEMM path. Both visit
//! the reduction in a fixed order, so results do not depend on the worker
//! count. The GEMM path is what the network uses; the direct path is the
//! equivalence oracle for it.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{check_dim, Result};

const K: usize = 3;
const KK: usize = K * K;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    Direct,
    #[default]
    Gemm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

fn check_conv(op: &'static str, input: Shape, weights: Shape, bias: Option<usize>) -> Result<()> {
    check_dim(op, "weights Cin", input.c, weights.c)?;
    check_dim(op, "kernel height", K, weights.h)?;
    check_dim(op, "kernel width", K, weights.w)?;
    if let Some(b) = bias {
        check_dim(op, "bias length", weights.n, b)?;
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    conv2d_with(input, weights, bias, ConvPath::Gemm)
}

pub fn conv2d_with(input: &Tensor, weights: &Tensor, bias: &[f32], path: ConvPath) -> Result<Tensor> {
    let (si, sw) = (input.shape(), weights.shape());
    check_conv("conv2d", si, sw, Some(bias.len()))?;
    let out_shape = Shape::new(si.n, sw.n, si.h, si.w);
    let per_out = sw.n * si.plane();
    let mut out = vec![0.0f32; out_shape.len()];
    out.par_chunks_mut(per_out.max(1))
        .enumerate()
        .for_each(|(n, dst)| match path {
            ConvPath::Direct => direct_sample(input.sample(n), si, weights, bias, dst),
            ConvPath::Gemm => gemm_sample(input.sample(n), si, weights, bias, dst),
        });
    Tensor::from_vec(out_shape, out)
}

fn direct_sample(x: &[f32], si: Shape, weights: &Tensor, bias: &[f32], dst: &mut [f32]) {
    let (h, w) = (si.h as isize, si.w as isize);
    let cout = weights.shape().n;
    let wd = weights.data();
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[co];
                for ci in 0..si.c {
                    for ky in 0..K as isize {
                        let iy = y + ky - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..K as isize {
                            let ix = xx + kx - 1;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let wv = wd[(co * si.c + ci) * KK + (ky as usize) * K + kx as usize];
                            acc += wv * x[(ci * si.h + iy as usize) * si.w + ix as usize];
                        }
                    }
                }
                dst[(co * si.h + y as usize) * si.w + xx as usize] = acc;
            }
        }
    }
}

/// Unfolds one `C*H*W` sample into a `(C*9) x (H*W)` column matrix.
fn im2col(x: &[f32], s: Shape, cols: &mut [f32]) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    for ci in 0..s.c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * KK) + ky * K + kx) * plane..][..plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto a `C*H*W` sample, accumulating overlaps.
fn col2im(cols: &[f32], s: Shape, x: &mut [f32]) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    for ci in 0..s.c {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * KK) + ky * K + kx) * plane..][..plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in drow.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides
/// so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every (row, col) index
    // reachable from the given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm_sample(x: &[f32], si: Shape, weights: &Tensor, bias: &[f32], dst: &mut [f32]) {
    let cout = weights.shape().n;
    let kdim = si.c * KK;
    let plane = si.plane();
    let mut cols = vec![0.0f32; kdim * plane];
    im2col(x, si, &mut cols);
    for (co, row) in dst.chunks_mut(plane).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        cout,
        kdim,
        plane,
        weights.data(),
        (kdim as isize, 1),
        &cols,
        (plane as isize, 1),
        1.0,
        dst,
    );
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_grad(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let (si, sw, su) = (input.shape(), weights.shape(), upstream.shape());
    check_conv("conv2d_grad", si, sw, None)?;
    check_dim("conv2d_grad", "upstream N", si.n, su.n)?;
    check_dim("conv2d_grad", "upstream C", sw.n, su.c)?;
    check_dim("conv2d_grad", "upstream H", si.h, su.h)?;
    check_dim("conv2d_grad", "upstream W", si.w, su.w)?;

    let cout = sw.n;
    let kdim = si.c * KK;
    let plane = si.plane();

    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = (0..si.n)
        .into_par_iter()
        .map(|n| {
            let x = input.sample(n);
            let gy = upstream.sample(n);
            let mut cols = vec![0.0f32; kdim * plane];
            im2col(x, si, &mut cols);
            // dW_n = gy[cout x plane] * cols^T[plane x kdim]
            let mut gw = vec![0.0f32; cout * kdim];
            gemm(
                cout,
                plane,
                kdim,
                gy,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                0.0,
                &mut gw,
            );
            // dcols = W^T[kdim x cout] * gy[cout x plane]
            gemm(
                kdim,
                cout,
                plane,
                weights.data(),
                (1, kdim as isize),
                gy,
                (plane as isize, 1),
                0.0,
                &mut cols,
            );
            let mut gx = vec![0.0f32; si.c * plane];
            col2im(&cols, si, &mut gx);
            (gx, gw)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(si.len());
    let mut grad_w = vec![0.0f32; cout * kdim];
    for (gx, gw) in per_sample {
        grad_input.extend_from_slice(&gx);
        for (acc, v) in grad_w.iter_mut().zip(&gw) {
            *acc += v;
        }
    }
    let mut grad_b = vec![0.0f32; cout];
    for n in 0..si.n {
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += upstream.plane(n, co).iter().sum::<f32>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(si, grad_input)?,
        weights: Tensor::from_vec(sw, grad_w)?,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Sextuple loop straight from the definition, in f64.
    fn reference(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
        let (sx, sw) = (x.shape(), w.shape());
        Tensor::from_fn(Shape::new(sx.n, sw.n, sx.h, sx.w), |n, co, y, xx| {
            let mut acc = b[co] as f64;
            for ci in 0..sx.c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy >= 0 && ix >= 0 && (iy as usize) < sx.h && (ix as usize) < sx.w {
                            acc += w.at(co, ci, ky, kx) as f64 * x.at(n, ci, iy as usize, ix as usize) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f32);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        for path in [ConvPath::Direct, ConvPath::Gemm] {
            assert_eq!(conv2d_with(&x, &w, &[0.0], path).unwrap(), x);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 3, 4, 5), &mut rng);
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let y = conv2d(&x, &w, &[0.0; 4]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), Shape::new(2, 4, 4, 5));
    }

    #[test]
    fn matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = random(Shape::new(1, 2, 5, 5), &mut rng);
            let w = random(Shape::new(3, 2, 3, 3), &mut rng);
            let b: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = reference(&x, &w, &b);
            for path in [ConvPath::Direct, ConvPath::Gemm] {
                let got = conv2d_with(&x, &w, &b, path).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-5, "{path:?}");
            }
        }
    }

    #[test]
    fn gemm_path_agrees_with_direct_on_odd_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, ci, co, h, w) in [(3, 5, 7, 9, 4), (1, 1, 1, 1, 1), (2, 16, 8, 8, 16)] {
            let x = random(Shape::new(n, ci, h, w), &mut rng);
            let wt = random(Shape::new(co, ci, 3, 3), &mut rng);
            let b: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = conv2d_with(&x, &wt, &b, ConvPath::Direct).unwrap();
            let g = conv2d_with(&x, &wt, &b, ConvPath::Gemm).unwrap();
            assert!(a.max_abs_diff(&g) < 1e-5);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        match conv2d(&x, &w, &[0.0]) {
            Err(Error::Shape { dim: "weights Cin", expected: 2, found: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(2, 2, 4, 4), &mut rng);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let g = conv2d_grad(&x, &w, &Tensor::zeros(Shape::new(2, 3, 4, 4))).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_is_upstream_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(2, 2, 4, 4), &mut rng);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let up = random(Shape::new(2, 3, 4, 4), &mut rng);
        let g = conv2d_grad(&x, &w, &up).unwrap();
        for co in 0..3 {
            let want: f32 = (0..2).map(|n| up.plane(n, co).iter().sum::<f32>()).sum();
            assert!((g.bias[co] - want).abs() < 1e-5);
        }
    }
}
