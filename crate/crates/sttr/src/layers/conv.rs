//! Graph convolution over joints (fixed and adaptive adjacency) and
//! temporal convolution over frames.

use rand_chacha::ChaCha8Rng;

use super::{LayerCtx, Residual};
use crate::error::{ConfigError, TensorError};
use crate::graph::AdjacencySet;
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{init, BatchNorm, Parameterized, Real, Tensor};

/// `Σ_k (x · A_k) W_k`: per-partition graph aggregation followed by a
/// channel map, with the K maps fused into one weight (mathematically
/// identical to K separate maps).
pub struct GcnCore<F: Real> {
    name: String,
    adjacency: Vec<Tensor<F>>,
    w: Tensor<F>,
    c_out: usize,
}

impl<F: Real> GcnCore<F> {
    pub fn new(
        name: impl Into<String>,
        adj: &AdjacencySet,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_matrices(name, adj.cast(), c_in, c_out, rng)
    }

    /// Build from explicit normalized matrices.
    pub fn with_matrices(
        name: impl Into<String>,
        adjacency: Vec<Tensor<F>>,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!adjacency.is_empty(), "graph convolution needs at least one partition");
        let k = adjacency.len();
        Self {
            name: name.into(),
            adjacency,
            w: init::fan_in_uniform(&[k * c_out, c_in], c_in, rng),
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut GradTape<F>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&format!("{}.w", self.name), &self.w);
        let h = tape.channel_map(x, w)?;
        let mut acc: Option<Var> = None;
        for (k, a) in self.adjacency.iter().enumerate() {
            let hk = tape.slice_axis(h, 1, k * self.c_out, self.c_out)?;
            let av = tape.input(a);
            let yk = tape.matmul(hk, av)?;
            acc = Some(match acc {
                None => yk,
                Some(s) => tape.add(s, yk)?,
            });
        }
        Ok(acc.expect("at least one partition"))
    }

    #[cfg(test)]
    pub(crate) fn set_weight(&mut self, w: Tensor<F>) {
        assert_eq!(w.shape(), self.w.shape());
        self.w = w;
    }
}

impl<F: Real> Parameterized<F> for GcnCore<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.w", self.name), &self.w);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.w", self.name), &mut self.w);
    }
}

/// Graph-convolution sublayer: core, batch norm, shortcut, ReLU.
pub struct GcnLayer<F: Real> {
    core: GcnCore<F>,
    bn: BatchNorm<F>,
    res: Residual<F>,
}

impl<F: Real> GcnLayer<F> {
    pub fn new(
        name: &str,
        adj: &AdjacencySet,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            core: GcnCore::new(format!("{name}.gcn"), adj, c_in, c_out, rng),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            res: Residual::new(format!("{name}.res"), c_in, c_out, false, rng),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let y = self.core.forward(tape, x)?;
        let y = self.bn.forward(tape, y, ctx.mode)?;
        let r = self.res.forward(tape, x)?;
        let y = tape.add(y, r)?;
        Ok(tape.relu(y))
    }
}

impl<F: Real> Parameterized<F> for GcnLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.core.visit_params(f);
        self.bn.visit_params(f);
        self.res.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.core.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.res.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn.visit_state_mut(f);
    }
}

/// Which terms of the adaptive adjacency are active.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgcnOptions {
    /// Include the fixed partition matrices A_k.
    pub use_fixed: bool,
    /// Include the data-dependent similarity term C_k.
    pub use_similarity: bool,
}

impl Default for AgcnOptions {
    fn default() -> Self {
        Self { use_fixed: true, use_similarity: true }
    }
}

/// Adaptive graph convolution: `Σ_k x (A_k + B_k + C_k) W_k` where B_k is a
/// learned V×V matrix (zero-initialized) and C_k is a row-stochastic
/// similarity of time-pooled joint embeddings, computed per sample.
pub struct AgcnLayer<F: Real> {
    name: String,
    adjacency: Option<Vec<Tensor<F>>>,
    w: Tensor<F>,
    bk: Tensor<F>,
    theta: Tensor<F>,
    phi: Tensor<F>,
    use_similarity: bool,
    k: usize,
    v: usize,
    c_out: usize,
    c_e: usize,
    bn: BatchNorm<F>,
    res: Residual<F>,
}

impl<F: Real> AgcnLayer<F> {
    pub fn new(
        name: &str,
        adj: &AdjacencySet,
        c_in: usize,
        c_out: usize,
        opts: AgcnOptions,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (k, v) = (adj.k(), adj.v());
        let c_e = (c_out / 4).max(1);
        Self {
            name: name.to_string(),
            adjacency: opts.use_fixed.then(|| adj.cast()),
            w: init::fan_in_uniform(&[k * c_out, c_in], c_in, rng),
            bk: Tensor::zeros(&[k, v, v]),
            theta: init::fan_in_uniform(&[k * c_e, c_in], c_in, rng),
            phi: init::fan_in_uniform(&[k * c_e, c_in], c_in, rng),
            use_similarity: opts.use_similarity,
            k,
            v,
            c_out,
            c_e,
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            res: Residual::new(format!("{name}.res"), c_in, c_out, false, rng),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let (n, t) = {
            let s = tape.shape(x);
            (s[0], s[2])
        };
        let w = tape.param(&format!("{}.w", self.name), &self.w);
        let h = tape.channel_map(x, w)?;
        let bk = tape.param(&format!("{}.bk", self.name), &self.bk);
        let embeds = if self.use_similarity {
            let pooled = tape.mean_axes(x, &[2])?;
            let th = tape.param(&format!("{}.theta", self.name), &self.theta);
            let ph = tape.param(&format!("{}.phi", self.name), &self.phi);
            Some((tape.channel_map(pooled, th)?, tape.channel_map(pooled, ph)?))
        } else {
            None
        };

        let mut acc: Option<Var> = None;
        for k in 0..self.k {
            let hk = tape.slice_axis(h, 1, k * self.c_out, self.c_out)?;
            let bkk = tape.slice_axis(bk, 0, k, 1)?;
            let bkk = tape.reshape(bkk, &[self.v, self.v])?;
            let fixed = match &self.adjacency {
                Some(mats) => {
                    let av = tape.input(&mats[k]);
                    tape.add(av, bkk)?
                }
                None => bkk,
            };
            let yk = match &embeds {
                Some((th_all, ph_all)) => {
                    let th_k = tape.slice_axis(*th_all, 1, k * self.c_e, self.c_e)?;
                    let ph_k = tape.slice_axis(*ph_all, 1, k * self.c_e, self.c_e)?;
                    let th_t = tape.permute(th_k, &[0, 2, 1])?;
                    let sim = tape.matmul(th_t, ph_k)?;
                    let ck = tape.softmax(sim, 2)?;
                    let adj = tape.add_broadcast(ck, fixed)?;
                    let flat = tape.reshape(hk, &[n, self.c_out * t, self.v])?;
                    let yk = tape.matmul(flat, adj)?;
                    tape.reshape(yk, &[n, self.c_out, t, self.v])?
                }
                None => tape.matmul(hk, fixed)?,
            };
            acc = Some(match acc {
                None => yk,
                Some(s) => tape.add(s, yk)?,
            });
        }
        let y = acc.expect("at least one partition");
        let y = self.bn.forward(tape, y, ctx.mode)?;
        let r = self.res.forward(tape, x)?;
        let y = tape.add(y, r)?;
        Ok(tape.relu(y))
    }

    /// The per-sample similarity matrices C_k for the current input, one
    /// (V, V) row-stochastic matrix per partition and sample.
    pub fn similarity_matrices(&self, x: &Tensor<F>) -> Result<Vec<Tensor<F>>, TensorError> {
        let mut tape = GradTape::new();
        let xv = tape.input(x);
        let pooled = tape.mean_axes(xv, &[2])?;
        let th = tape.input(&self.theta);
        let ph = tape.input(&self.phi);
        let th_all = tape.channel_map(pooled, th)?;
        let ph_all = tape.channel_map(pooled, ph)?;
        let mut out = Vec::with_capacity(self.k);
        for k in 0..self.k {
            let th_k = tape.slice_axis(th_all, 1, k * self.c_e, self.c_e)?;
            let ph_k = tape.slice_axis(ph_all, 1, k * self.c_e, self.c_e)?;
            let th_t = tape.permute(th_k, &[0, 2, 1])?;
            let sim = tape.matmul(th_t, ph_k)?;
            let ck = tape.softmax(sim, 2)?;
            out.push(tape.value(ck).clone());
        }
        Ok(out)
    }
}

impl<F: Real> Parameterized<F> for AgcnLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.bk", self.name), &self.bk);
        f(&format!("{}.theta", self.name), &self.theta);
        f(&format!("{}.phi", self.name), &self.phi);
        self.bn.visit_params(f);
        self.res.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.bk", self.name), &mut self.bk);
        f(&format!("{}.theta", self.name), &mut self.theta);
        f(&format!("{}.phi", self.name), &mut self.phi);
        self.bn.visit_params_mut(f);
        self.res.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn.visit_state_mut(f);
    }
}

/// Convolution along the frame axis with an odd kernel and same-padding.
pub struct TcnCore<F: Real> {
    name: String,
    w: Tensor<F>,
    kt: usize,
    stride: usize,
}

impl<F: Real> TcnCore<F> {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kt: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ConfigError> {
        if kt % 2 == 0 {
            return Err(ConfigError(format!("temporal kernel must be odd, got {kt}")));
        }
        if stride == 0 {
            return Err(ConfigError("temporal stride must be at least 1".into()));
        }
        Ok(Self {
            name: name.into(),
            w: init::fan_in_uniform(&[c_out, c_in, kt, 1], c_in * kt, rng),
            kt,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut GradTape<F>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&format!("{}.w", self.name), &self.w);
        tape.conv_time(x, w, self.stride, (self.kt - 1) / 2)
    }

    #[cfg(test)]
    pub(crate) fn set_weight(&mut self, w: Tensor<F>) {
        assert_eq!(w.shape(), self.w.shape());
        self.w = w;
    }
}

impl<F: Real> Parameterized<F> for TcnCore<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.w", self.name), &self.w);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.w", self.name), &mut self.w);
    }
}

/// Temporal-convolution sublayer: core, batch norm, shortcut, ReLU. The
/// shortcut subsamples and projects when the layer strides.
pub struct TcnLayer<F: Real> {
    core: TcnCore<F>,
    stride: usize,
    bn: BatchNorm<F>,
    res: Residual<F>,
}

impl<F: Real> TcnLayer<F> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kt: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ConfigError> {
        Ok(Self {
            core: TcnCore::new(format!("{name}.tcn"), c_in, c_out, kt, stride, rng)?,
            stride,
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            res: Residual::new(format!("{name}.res"), c_in, c_out, stride > 1, rng),
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let y = self.core.forward(tape, x)?;
        let y = self.bn.forward(tape, y, ctx.mode)?;
        let mut r = x;
        if self.stride > 1 {
            r = tape.subsample(r, 2, self.stride)?;
        }
        let r = self.res.forward(tape, r)?;
        let y = tape.add(y, r)?;
        Ok(tape.relu(y))
    }
}

impl<F: Real> Parameterized<F> for TcnLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.core.visit_params(f);
        self.bn.visit_params(f);
        self.res.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.core.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.res.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn.visit_state_mut(f);
    }
}
