use super::{Shape, Tensor};
use crate::error::{check_dim, Error, Result};

/// Argmax positions recorded by [`max_pool_2x2`].
///
/// One entry per pooled cell: the row-major offset (0..4) of the winning
/// element inside that cell's 2x2 input window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Shape,
    offsets: Vec<u8>,
}

impl PoolIndices {
    pub fn new(shape: Shape, offsets: Vec<u8>) -> Result<Self> {
        check_dim("PoolIndices::new", "offsets length", shape.len(), offsets.len())?;
        Ok(Self { shape, offsets })
    }

    /// Shape of the pooled output these indices belong to.
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    /// Flat input index (into the unpooled tensor) addressed by output cell `i`.
    pub fn input_index(&self, i: usize) -> usize {
        let s = self.shape;
        let x = i % s.w;
        let y = (i / s.w) % s.h;
        let nc = i / s.plane();
        let off = self.offsets[i] as usize;
        let (iy, ix) = (2 * y + off / 2, 2 * x + off % 2);
        (nc * 2 * s.h + iy) * 2 * s.w + ix
    }
}

/// 2x2, stride 2 max pooling. Ties go to the first maximal element in
/// row-major window order.
pub fn max_pool_2x2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool_2x2",
            msg: format!("H and W must be even, got {}x{}", s.h, s.w),
        });
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut values = Vec::with_capacity(out_shape.len());
    let mut offsets = Vec::with_capacity(out_shape.len());
    let x = input.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..out_shape.h {
            let r0 = base + 2 * oy * s.w;
            let r1 = r0 + s.w;
            for ox in 0..out_shape.w {
                let window = [x[r0 + 2 * ox], x[r0 + 2 * ox + 1], x[r1 + 2 * ox], x[r1 + 2 * ox + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if window[k] > window[best] {
                        best = k;
                    }
                }
                values.push(window[best]);
                offsets.push(best as u8);
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, values)?,
        PoolIndices {
            shape: out_shape,
            offsets,
        },
    ))
}

/// Scatters `values` back to the recorded argmax positions of a 2x larger
/// tensor, zero elsewhere.
pub fn max_unpool_2x2(values: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    let s = values.shape();
    let is = indices.shape;
    check_dim("max_unpool_2x2", "N", is.n, s.n)?;
    check_dim("max_unpool_2x2", "C", is.c, s.c)?;
    check_dim("max_unpool_2x2", "H", is.h, s.h)?;
    check_dim("max_unpool_2x2", "W", is.w, s.w)?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w));
    for (i, (&v, &off)) in values.data().iter().zip(&indices.offsets).enumerate() {
        if off > 3 {
            return Err(Error::CorruptIndices {
                cell: i,
                offset: off as usize,
            });
        }
        out.data_mut()[indices.input_index(i)] = v;
    }
    Ok(out)
}

/// Gradient of [`max_pool_2x2`]: routes each upstream value to its argmax.
pub fn max_pool_2x2_grad(upstream: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    max_unpool_2x2(upstream, indices)
}

/// Gradient of [`max_unpool_2x2`]: gathers the upstream at the recorded positions.
pub fn max_unpool_2x2_grad(upstream: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    let is = indices.shape;
    let us = upstream.shape();
    check_dim("max_unpool_2x2_grad", "N", is.n, us.n)?;
    check_dim("max_unpool_2x2_grad", "C", is.c, us.c)?;
    check_dim("max_unpool_2x2_grad", "H", 2 * is.h, us.h)?;
    check_dim("max_unpool_2x2_grad", "W", 2 * is.w, us.w)?;
    let data = (0..is.len())
        .map(|i| upstream.data()[indices.input_index(i)])
        .collect();
    Tensor::from_vec(is, data)
}
