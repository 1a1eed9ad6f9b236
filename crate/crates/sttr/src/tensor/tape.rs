//! Reverse-mode automatic differentiation over an arena of tensor ops.
//!
//! A forward pass appends nodes to the tape; `backward` sweeps the arena in
//! reverse, accumulating gradients into every leaf that asked for them. A
//! tape differentiates once: the second `backward` call reports
//! `TapeConsumed` instead of silently returning stale numbers.

use std::collections::HashMap;

use super::kernels::{
    axis_split, bmm, col2im_time, conv_out_len, im2col_time, permute, permute_scatter_add,
    resolve_matmul, softmax_axis, softmax_backward_axis, MatmulDims,
};
use super::{row_major_strides, Real, Tensor};
use crate::error::TensorError;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, for the caller's
/// running-average update. Variance is biased (divided by the count).
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    BiasAdd { x: Var, b: Var, axis: usize },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    Relu { x: Var },
    Matmul { a: Var, b: Var, dims: MatmulDims },
    ChannelMap { x: Var, w: Var },
    ConvTime { x: Var, w: Var, stride: usize, pad: usize, t_out: usize, cols: Vec<F> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, x_hat: Vec<F>, inv_std: Vec<F> },
    ChannelAffine { x: Var, scale: Vec<F> },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize },
    Subsample { x: Var, axis: usize, stride: usize },
    MeanAxes { x: Var, axes: Vec<usize> },
    SumAll { x: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, kept for leaf nodes only.
pub struct Gradients<F> {
    slots: Vec<Option<Tensor<F>>>,
    names: HashMap<String, usize>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a leaf var, if it required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    /// Gradient of a named parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.get(name).and_then(|&id| self.slots[id].as_ref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(|s| s.as_str())
    }
}

/// Arena of forward values plus enough saved context to run backward.
pub struct GradTape<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, usize)>,
    param_ids: HashMap<String, usize>,
    consumed: bool,
}

impl<F: Real> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> GradTape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), param_ids: HashMap::new(), consumed: false }
    }

    /// Puts a tensor on the tape; it participates in differentiation only if
    /// it was marked with `with_grad`.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Registers a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, t: &Tensor<F>) -> Var {
        assert!(
            !self.param_ids.contains_key(name),
            "duplicate parameter name on tape: {name}"
        );
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        self.param_ids.insert(name.to_string(), v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    /// `a + b` where b's shape is a trailing suffix of a's shape; b tiles over
    /// the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(TensorError::DimMismatch { op: "add_broadcast", lhs: sa, rhs: sb });
        }
        let nb = self.value(b).numel();
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(nb) {
            for (x, &y) in chunk.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(sa, data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::AddBroadcast { a, b }, needs))
    }

    /// Adds a 1-D vector along one axis (bias over a channel axis).
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: sx });
        }
        if sb.len() != 1 || sb[0] != sx[axis] {
            return Err(TensorError::DimMismatch { op: "bias_add", lhs: sx, rhs: sb });
        }
        let (outer, len, inner) = axis_split(&sx, axis);
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..len {
                let base = (o * len + c) * inner;
                let add = bv[c];
                for v in &mut data[base..base + inner] {
                    *v += add;
                }
            }
        }
        let t = Tensor::from_parts(sx, data);
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::BiasAdd { x, b, axis }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data: Vec<F> = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// Batched matrix product. A rank-2 operand broadcasts over the other
    /// side's batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (dims, out_shape) = resolve_matmul(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let a_stride = if dims.a_batched { dims.m * dims.k } else { 0 };
        let b_stride = if dims.b_batched { dims.k * dims.n } else { 0 };
        bmm(
            dims.batch, dims.m, dims.k, dims.n,
            self.value(a).data(), a_stride, false,
            self.value(b).data(), b_stride, false,
            F::zero(), &mut out, dims.m * dims.n,
        );
        let t = Tensor::from_parts(out_shape, out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul { a, b, dims }, needs))
    }

    /// Linear map over the channel axis (axis 1): a 1x1 convolution.
    /// `x` is (N, C_in, ...), `w` is (C_out, C_in).
    pub fn channel_map(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(TensorError::DimMismatch { op: "channel_map", lhs: sx, rhs: sw });
        }
        let (n, c_in) = (sx[0], sx[1]);
        let s: usize = sx[2..].iter().product();
        let c_out = sw[0];
        let mut out = vec![F::zero(); n * c_out * s];
        bmm(
            n, c_out, c_in, s,
            self.value(w).data(), 0, false,
            self.value(x).data(), c_in * s, false,
            F::zero(), &mut out, c_out * s,
        );
        let mut out_shape = sx.clone();
        out_shape[1] = c_out;
        let t = Tensor::from_parts(out_shape, out);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::ChannelMap { x, w }, needs))
    }

    /// Convolution along the time axis of (N, C, T, V) with kernel
    /// `w` (C_out, C_in, Kt, 1), zero padding, and temporal stride. The
    /// trailing extent of 1 marks this as a 1 x Kt two-dimensional kernel
    /// that leaves the joint axis untouched.
    pub fn conv_time(
        &mut self, x: Var, w: Var, stride: usize, pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[3] != 1 {
            return Err(TensorError::DimMismatch { op: "conv_time", lhs: sx, rhs: sw });
        }
        let (n, c, t, v) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kt) = (sw[0], sw[2]);
        let t_out = conv_out_len(t, kt, stride, pad).ok_or_else(|| {
            TensorError::DegenerateOutput(format!(
                "conv_time with T={t}, kernel {kt}, stride {stride}, pad {pad} yields no frames"
            ))
        })?;
        let cols = im2col_time(self.value(x).data(), n, c, t, v, kt, stride, pad, t_out);
        let mut out = vec![F::zero(); n * c_out * t_out * v];
        bmm(
            n, c_out, c * kt, t_out * v,
            self.value(w).data(), 0, false,
            &cols, c * kt * t_out * v, false,
            F::zero(), &mut out, c_out * t_out * v,
        );
        let tensor = Tensor::from_parts(vec![n, c_out, t_out, v], out);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(tensor, Op::ConvTime { x, w, stride, pad, t_out, cols }, needs))
    }

    /// Training-mode batch norm over every axis except the channel axis
    /// (axis 1). Returns the normalised var plus the batch statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self, x: Var, gamma: Var, beta: Var, eps: F,
    ) -> Result<(Var, BatchStats<F>), TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(TensorError::InvalidShape {
                shape: sx,
                reason: "batch norm needs a channel axis".into(),
            });
        }
        let c = sx[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.len() != 1 || s[0] != c {
                return Err(TensorError::DimMismatch {
                    op: if name == "gamma" { "batch_norm gamma" } else { "batch_norm beta" },
                    lhs: sx.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&sx, 1);
        let r = outer * inner;
        let rf = F::of(r as f64);
        let xd = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let mut s = F::zero();
                for &v in &xd[base..base + inner] {
                    s += v;
                }
                mean[ci] += s;
            }
        }
        for m in &mut mean {
            *m /= rf;
        }
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let mu = mean[ci];
                let mut s = F::zero();
                for &v in &xd[base..base + inner] {
                    let d = v - mu;
                    s += d * d;
                }
                var[ci] += s;
            }
        }
        for v in &mut var {
            *v /= rf;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut x_hat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        let xd = self.value(x).data();
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in 0..inner {
                    let xh = (xd[base + i] - mu) * is;
                    x_hat[base + i] = xh;
                    y[base + i] = ga * xh + be;
                }
            }
        }
        let t = Tensor::from_parts(sx, y);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_node = self.push(t, Op::BatchNormTrain { x, gamma, beta, x_hat, inv_std }, needs);
        Ok((var_node, BatchStats { mean, var }))
    }

    /// Per-channel affine `y = scale[c] * x + shift[c]` with constant
    /// coefficients (evaluation-mode batch norm folded into one op).
    pub fn channel_affine(
        &mut self, x: Var, scale: &[F], shift: &[F],
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || scale.len() != sx[1] || shift.len() != sx[1] {
            return Err(TensorError::DimMismatch {
                op: "channel_affine",
                lhs: sx,
                rhs: vec![scale.len()],
            });
        }
        let (outer, c, inner) = axis_split(&sx, 1);
        let xd = self.value(x).data();
        let mut y = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let (s, sh) = (scale[ci], shift[ci]);
                for i in 0..inner {
                    y[base + i] = s * xd[base + i] + sh;
                }
            }
        }
        let t = Tensor::from_parts(sx, y);
        let needs = self.needs(x);
        Ok(self.push(t, Op::ChannelAffine { x, scale: scale.to_vec() }, needs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: sx });
        }
        let y = softmax_axis(self.value(x).data(), &sx, axis);
        let t = Tensor::from_parts(sx, y);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    /// Mean cross-entropy between logits (N, K) and integer labels, fused
    /// with a stable log-softmax. Output is a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(TensorError::InvalidShape {
                shape: sl,
                reason: format!("cross_entropy wants (N, K) logits with {} labels", labels.len()),
            });
        }
        let (n, k) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let xd = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= F::of(n as f64);
        let t = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, needs))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != sx.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(TensorError::InvalidShape {
                shape: sx,
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let (data, out_shape) = permute(self.value(x).data(), &sx, perm);
        let t = Tensor::from_parts(out_shape, data);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(x).numel() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?}", self.shape(x)),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: base_shape });
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (&a, &b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![F::zero(); out_shape.iter().product()];
        for o in 0..outer {
            let mut at = 0usize;
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = &self.value(x).data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + at) * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
                at += len;
            }
        }
        let t = Tensor::from_parts(out_shape, data);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    pub fn slice_axis(
        &mut self, x: Var, axis: usize, start: usize, len: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: sx });
        }
        if len == 0 || start + len > sx[axis] {
            return Err(TensorError::InvalidShape {
                shape: sx,
                reason: format!("slice [{start}, {}) exceeds axis {axis}", start + len),
            });
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let xd = self.value(x).data();
        let mut data = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let t = Tensor::from_parts(out_shape, data);
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceAxis { x, axis, start }, needs))
    }

    /// Keeps every `stride`-th index along an axis, starting at 0.
    pub fn subsample(&mut self, x: Var, axis: usize, stride: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: sx });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape { shape: sx, reason: "stride of 0".into() });
        }
        if stride == 1 {
            let t = self.value(x).clone();
            let needs = self.needs(x);
            return Ok(self.push(t, Op::Reshape { x }, needs));
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let kept = full.div_ceil(stride);
        let mut out_shape = sx.clone();
        out_shape[axis] = kept;
        let xd = self.value(x).data();
        let mut data = vec![F::zero(); outer * kept * inner];
        for o in 0..outer {
            for j in 0..kept {
                let src = (o * full + j * stride) * inner;
                let dst = (o * kept + j) * inner;
                data[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let t = Tensor::from_parts(out_shape, data);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Subsample { x, axis, stride }, needs))
    }

    /// Mean over a set of axes; reduced axes are removed from the shape (a
    /// full reduction leaves a scalar).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= sx.len()) {
            return Err(TensorError::AxisOutOfRange {
                axis: axes.last().copied().unwrap_or(0),
                shape: sx,
            });
        }
        let (out_shape, map_strides, count) = mean_layout(&sx, &axes);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        walk_reduce(xd, &sx, &map_strides, &mut out);
        let inv = F::one() / F::of(count as f64);
        for v in &mut out {
            *v *= inv;
        }
        let t = Tensor::from_parts(out_shape, out);
        let needs = self.needs(x);
        Ok(self.push(t, Op::MeanAxes { x, axes }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().cloned().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's ability to
    /// differentiate; values remain readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            grads[i] = Some(g);
        }
        let slots: Vec<Option<Tensor<F>>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(data)) => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data))
                }
                _ => None,
            })
            .collect();
        let names = self.param_ids.clone();
        Ok(Gradients { slots, names })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut Vec<Option<Vec<F>>>) {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    if self.needs(side) {
                        let buf = self.grad_buf(grads, side);
                        for (d, &gv) in buf.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.needs(*a) {
                    let buf = self.grad_buf(grads, *a);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let nb = self.nodes[b.0].value.numel();
                    let buf = self.grad_buf(grads, *b);
                    for (j, &gv) in g.iter().enumerate() {
                        buf[j % nb] += gv;
                    }
                }
            }
            Op::BiasAdd { x, b, axis } => {
                if self.needs(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let (outer, len, inner) = axis_split(value.shape(), *axis);
                    let buf = self.grad_buf(grads, *b);
                    for o in 0..outer {
                        for c in 0..len {
                            let base = (o * len + c) * inner;
                            let mut s = F::zero();
                            for &gv in &g[base..base + inner] {
                                s += gv;
                            }
                            buf[c] += s;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let buf = self.grad_buf(grads, *a);
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    let buf = self.grad_buf(grads, *b);
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    let buf = self.grad_buf(grads, *x);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let yd = value.data();
                    let buf = self.grad_buf(grads, *x);
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(yd) {
                        if y > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Matmul { a, b, dims } => {
                let &MatmulDims { batch, m, k, n, a_batched, b_batched } = dims;
                let a_stride = if a_batched { m * k } else { 0 };
                let b_stride = if b_batched { k * n } else { 0 };
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let buf = self.grad_buf(grads, *a);
                    bmm(
                        batch, m, n, k, g, m * n, false, bv, b_stride, true, F::one(), buf,
                        a_stride,
                    );
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    let buf = self.grad_buf(grads, *b);
                    bmm(
                        batch, k, m, n, av, a_stride, true, g, m * n, false, F::one(), buf,
                        b_stride,
                    );
                }
            }
            Op::ChannelMap { x, w } => {
                let sx = self.nodes[x.0].value.shape();
                let (n, c_in) = (sx[0], sx[1]);
                let s: usize = sx[2..].iter().product();
                let c_out = self.nodes[w.0].value.shape()[0];
                if self.needs(*w) {
                    let xv = self.nodes[x.0].value.data();
                    let buf = self.grad_buf(grads, *w);
                    bmm(n, c_out, s, c_in, g, c_out * s, false, xv, c_in * s, true, F::one(), buf, 0);
                }
                if self.needs(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let buf = self.grad_buf(grads, *x);
                    bmm(n, c_in, c_out, s, wv, 0, true, g, c_out * s, false, F::one(), buf, c_in * s);
                }
            }
            Op::ConvTime { x, w, stride, pad, t_out, cols } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (n, c, t, v) = (sx[0], sx[1], sx[2], sx[3]);
                let (c_out, kt) = (sw[0], sw[2]);
                let (t_out, stride, pad) = (*t_out, *stride, *pad);
                if self.needs(*w) {
                    let buf = self.grad_buf(grads, *w);
                    bmm(
                        n, c_out, t_out * v, c * kt,
                        g, c_out * t_out * v, false,
                        cols, c * kt * t_out * v, true,
                        F::one(), buf, 0,
                    );
                }
                if self.needs(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let mut dcols = vec![F::zero(); n * c * kt * t_out * v];
                    bmm(
                        n, c * kt, c_out, t_out * v,
                        wv, 0, true,
                        g, c_out * t_out * v, false,
                        F::zero(), &mut dcols, c * kt * t_out * v,
                    );
                    let buf = self.grad_buf(grads, *x);
                    col2im_time(&dcols, n, c, t, v, kt, stride, pad, t_out, buf);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, x_hat, inv_std } => {
                let shape = value.shape();
                let (outer, c, inner) = axis_split(shape, 1);
                let r = F::of((outer * inner) as f64);
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for o in 0..outer {
                    for ci in 0..c {
                        let base = (o * c + ci) * inner;
                        let mut sg = F::zero();
                        let mut sgx = F::zero();
                        for i in 0..inner {
                            sg += g[base + i];
                            sgx += g[base + i] * x_hat[base + i];
                        }
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
                if self.needs(*gamma) {
                    let buf = self.grad_buf(grads, *gamma);
                    for (d, &v) in buf.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if self.needs(*beta) {
                    let buf = self.grad_buf(grads, *beta);
                    for (d, &v) in buf.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                if self.needs(*x) {
                    let gv = self.nodes[gamma.0].value.data();
                    let buf = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        for ci in 0..c {
                            let base = (o * c + ci) * inner;
                            let coef = gv[ci] * inv_std[ci];
                            let (mg, mgx) = (sum_g[ci] / r, sum_gx[ci] / r);
                            for i in 0..inner {
                                buf[base + i] +=
                                    coef * (g[base + i] - mg - x_hat[base + i] * mgx);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale } => {
                if self.needs(*x) {
                    let (outer, c, inner) = axis_split(value.shape(), 1);
                    let buf = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        for ci in 0..c {
                            let base = (o * c + ci) * inner;
                            let s = scale[ci];
                            for i in 0..inner {
                                buf[base + i] += g[base + i] * s;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let buf = self.grad_buf(grads, *x);
                    softmax_backward_axis(value.data(), g, value.shape(), *axis, buf);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let (n, k) = {
                        let s = self.nodes[logits.0].value.shape();
                        (s[0], s[1])
                    };
                    let g0 = g[0] / F::of(n as f64);
                    let buf = self.grad_buf(grads, *logits);
                    for i in 0..n {
                        for j in 0..k {
                            let mut d = probs[i * k + j];
                            if j == labels[i] {
                                d -= F::one();
                            }
                            buf[i * k + j] += g0 * d;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let in_shape = self.nodes[x.0].value.shape();
                    let buf = self.grad_buf(grads, *x);
                    permute_scatter_add(g, in_shape, perm, buf);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(value.shape(), *axis);
                let mut at = 0usize;
                for &xv in xs {
                    let len = self.nodes[xv.0].value.shape()[*axis];
                    if self.needs(xv) {
                        let buf = self.grad_buf(grads, xv);
                        for o in 0..outer {
                            let src = (o * total + at) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                buf[dst + j] += g[src + j];
                            }
                        }
                    }
                    at += len;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if self.needs(*x) {
                    let full = self.nodes[x.0].value.shape()[*axis];
                    let (outer, len, inner) = axis_split(value.shape(), *axis);
                    let buf = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            buf[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Subsample { x, axis, stride } => {
                if self.needs(*x) {
                    let full = self.nodes[x.0].value.shape()[*axis];
                    let (outer, kept, inner) = axis_split(value.shape(), *axis);
                    let buf = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        for j in 0..kept {
                            let dst = (o * full + j * stride) * inner;
                            let src = (o * kept + j) * inner;
                            for t in 0..inner {
                                buf[dst + t] += g[src + t];
                            }
                        }
                    }
                }
            }
            Op::MeanAxes { x, axes } => {
                if self.needs(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let (_, map_strides, count) = mean_layout(&in_shape, axes);
                    let inv = F::one() / F::of(count as f64);
                    let buf = self.grad_buf(grads, *x);
                    let mut idx = vec![0usize; in_shape.len()];
                    let mut out_off = 0usize;
                    for d in buf.iter_mut() {
                        *d += g[out_off] * inv;
                        for ax in (0..in_shape.len()).rev() {
                            idx[ax] += 1;
                            out_off += map_strides[ax];
                            if idx[ax] < in_shape[ax] {
                                break;
                            }
                            idx[ax] = 0;
                            out_off -= map_strides[ax] * in_shape[ax];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let g0 = g[0];
                    let buf = self.grad_buf(grads, *x);
                    for d in buf.iter_mut() {
                        *d += g0;
                    }
                }
            }
        }
    }

    #[allow(clippy::ptr_arg)]
    fn grad_buf<'a>(&self, grads: &'a mut Vec<Option<Vec<F>>>, v: Var) -> &'a mut Vec<F> {
        let numel = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); numel])
    }
}

/// Output shape, per-input-axis output strides (0 for reduced axes), and the
/// reduction count for a mean over `axes`.
fn mean_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let reduced: Vec<bool> = (0..shape.len()).map(|i| axes.contains(&i)).collect();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let out_strides = row_major_strides(&out_shape);
    let mut map = vec![0usize; shape.len()];
    let mut kept = 0usize;
    for (i, &r) in reduced.iter().enumerate() {
        if !r {
            map[i] = out_strides[kept];
            kept += 1;
        }
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    (out_shape, map, count)
}

/// Adds every element of `x` into `out` at the offset given by dropping the
/// reduced axes (those with a zero map stride).
fn walk_reduce<F: Real>(x: &[F], shape: &[usize], map_strides: &[usize], out: &mut [F]) {
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for &v in x {
        out[off] += v;
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += map_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= map_strides[ax] * shape[ax];
        }
    }
}
