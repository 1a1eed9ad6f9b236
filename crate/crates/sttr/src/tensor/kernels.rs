//! Compute kernels behind the tape ops: batched GEMM with broadcast,
//! time-axis convolution via im2col, axis-sliced softmax, and permutation.

use super::{row_major_strides, Real};
use crate::error::TensorError;

/// Resolved dimensions of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

/// Shapes [..batch, m, k] x [..batch, k, n]; a rank-2 operand broadcasts over
/// the other side's batch dimensions.
pub fn resolve_matmul(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>), TensorError> {
    let mismatch = || TensorError::DimMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(mismatch());
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let (batch_dims, a_batched, b_batched) = if ba == bb {
        (ba, !ba.is_empty(), !bb.is_empty())
    } else if ba.is_empty() {
        (bb, false, true)
    } else if bb.is_empty() {
        (ba, true, false)
    } else {
        return Err(mismatch());
    };
    let batch: usize = batch_dims.iter().product();
    let mut out = batch_dims.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatmulDims { batch, m, k: ka, n, a_batched, b_batched },
        out,
    ))
}

/// Per-batch `out = A * B (+ beta * out)`.
///
/// Each `A` block is (m x k) row-major, or its transpose is taken from a
/// (k x m) row-major block when `ta` is set; likewise for `B` with `tb`.
/// A stride of 0 reuses the same block for every batch entry; `out_stride` of
/// 0 accumulates every product into the first block (callers pass beta = 1
/// and a pre-filled buffer in that case).
#[allow(clippy::too_many_arguments)]
pub fn bmm<F: Real>(
    batch: usize, m: usize, k: usize, n: usize,
    a: &[F], a_stride: usize, ta: bool,
    b: &[F], b_stride: usize, tb: bool,
    beta: F, out: &mut [F], out_stride: usize,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        let av = &a[i * a_stride..];
        let bv = &b[i * b_stride..];
        let cv = &mut out[i * out_stride..];
        F::gemm_strided(m, k, n, av, rsa, csa, bv, rsb, csb, beta, cv);
    }
}

/// Splits a shape at `axis` into (outer, axis length, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reorders axes; returns the permuted data and its shape.
pub fn permute<F: Copy>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return (data.to_vec(), out_shape);
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= step[ax] * out_shape[ax];
        }
    }
    (out, out_shape)
}

/// Scatter counterpart of `permute`: adds `data` laid out in permuted order
/// back into a buffer with the original layout.
pub fn permute_scatter_add<F: Real>(data: &[F], shape: &[usize], perm: &[usize], out: &mut [F]) {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &val in data {
        out[off] += val;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= step[ax] * out_shape[ax];
        }
    }
}

/// Softmax over one axis, numerically stabilised by the slice max.
pub fn softmax_axis<F: Real>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                let v = x[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    out
}

/// dx for softmax along an axis: y * (g - sum(g * y)) per slice.
pub fn softmax_backward_axis<F: Real>(
    y: &[F], g: &[F], shape: &[usize], axis: usize, dx: &mut [F],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for j in 0..len {
                let p = base + j * inner;
                dot += g[p] * y[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (g[p] - dot);
            }
        }
    }
}

/// Output length of a time-axis convolution.
pub fn conv_out_len(t: usize, kt: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = t + 2 * pad;
    if span < kt || stride == 0 {
        return None;
    }
    Some((span - kt) / stride + 1)
}

/// Unfolds (N, C, T, V) along T into columns (N, C*Kt, T_out*V) so the
/// convolution becomes one GEMM per batch entry.
pub fn im2col_time<F: Real>(
    x: &[F], n: usize, c: usize, t: usize, v: usize,
    kt: usize, stride: usize, pad: usize, t_out: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); n * c * kt * t_out * v];
    let col_stride = c * kt * t_out * v;
    for ni in 0..n {
        let x_n = &x[ni * c * t * v..];
        let cols_n = &mut cols[ni * col_stride..(ni + 1) * col_stride];
        for ci in 0..c {
            for j in 0..kt {
                let row = (ci * kt + j) * t_out * v;
                for to in 0..t_out {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let src = (ci * t + ti as usize) * v;
                    let dst = row + to * v;
                    cols_n[dst..dst + v].copy_from_slice(&x_n[src..src + v]);
                }
            }
        }
    }
    cols
}

/// Folds column gradients back onto the (N, C, T, V) input, accumulating
/// overlapping taps.
#[allow(clippy::too_many_arguments)]
pub fn col2im_time<F: Real>(
    cols: &[F], n: usize, c: usize, t: usize, v: usize,
    kt: usize, stride: usize, pad: usize, t_out: usize, dx: &mut [F],
) {
    let col_stride = c * kt * t_out * v;
    for ni in 0..n {
        let cols_n = &cols[ni * col_stride..];
        let dx_n = &mut dx[ni * c * t * v..(ni + 1) * c * t * v];
        for ci in 0..c {
            for j in 0..kt {
                let row = (ci * kt + j) * t_out * v;
                for to in 0..t_out {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let dst = (ci * t + ti as usize) * v;
                    let src = row + to * v;
                    for vi in 0..v {
                        dx_n[dst + vi] += cols_n[src + vi];
                    }
                }
            }
        }
    }
}
