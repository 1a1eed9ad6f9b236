//! Multi-head scaled dot-product self-attention over joints (spatial) or
//! frames (temporal), with key-column dropout and optional block-windowed
//! temporal attention.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{dims4, AttentionAxis, AttentionRecord, LayerCtx, Residual};
use crate::error::{ConfigError, TensorError};
use crate::tensor::kernels::softmax_axis;
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{init, BatchNorm, Mode, Parameterized, Real, Tensor};

/// Additive mask value for dropped key columns; drives softmax weight to 0.
pub const MASKED: f64 = -1e30;

/// How wide the value projection is relative to the layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDim {
    /// d_v_total = C_out.
    FullOutput,
    /// d_v_total = C_out / 4, same as the query/key embedding.
    QuarterOutput,
}

/// Dimensions of one self-attention sublayer. Query/key width is C_out/4;
/// all three projections split evenly across heads.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub heads: usize,
    pub d_q_total: usize,
    pub d_k_total: usize,
    pub d_v_total: usize,
    pub drop_rate: f64,
}

impl SelfAttentionConfig {
    pub fn new(
        c_in: usize,
        c_out: usize,
        heads: usize,
        value_dim: ValueDim,
        drop_rate: f64,
    ) -> Result<Self, ConfigError> {
        if heads == 0 {
            return Err(ConfigError("attention needs at least one head".into()));
        }
        if c_out % 4 != 0 {
            return Err(ConfigError(format!(
                "attention output channels must be divisible by 4, got {c_out}"
            )));
        }
        let d_q_total = c_out / 4;
        let d_v_total = match value_dim {
            ValueDim::FullOutput => c_out,
            ValueDim::QuarterOutput => c_out / 4,
        };
        for (what, d) in [("query/key", d_q_total), ("value", d_v_total)] {
            if d % heads != 0 || d / heads == 0 {
                return Err(ConfigError(format!(
                    "{what} channels {d} (C_out={c_out}) must split evenly over {heads} heads"
                )));
            }
        }
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(ConfigError(format!("attention drop rate {drop_rate} outside [0, 1)")));
        }
        Ok(Self { c_in, c_out, heads, d_q_total, d_k_total: d_q_total, d_v_total, drop_rate })
    }

    pub fn head_q(&self) -> usize {
        self.d_q_total / self.heads
    }

    pub fn head_v(&self) -> usize {
        self.d_v_total / self.heads
    }
}

fn sample_column_mask(cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..cols).map(|_| rng.gen::<f64>() >= rate).collect();
        if mask.iter().any(|&keep| keep) {
            return mask;
        }
    }
}

/// Key-column dropout on attention logits. Train mode masks each column of
/// the trailing (rows, cols) matrices with probability `drop_rate`, adding a
/// large negative value so the following softmax assigns it zero weight; a
/// fully-dropped matrix is resampled so at least one column survives per
/// row. Eval mode (or rate 0) returns the logits untouched.
pub fn drop_attention<F: Real>(
    logits: &Tensor<F>,
    drop_rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>, ConfigError> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(ConfigError(format!("attention drop rate {drop_rate} outside [0, 1)")));
    }
    if logits.rank() < 2 {
        return Err(ConfigError("attention logits need row and column axes".into()));
    }
    let mut out = logits.clone();
    if mode == Mode::Eval || drop_rate == 0.0 {
        return Ok(out);
    }
    let cols = logits.shape()[logits.rank() - 1];
    let rows = logits.shape()[logits.rank() - 2];
    let mats = logits.numel() / (rows * cols);
    for m in 0..mats {
        let mask = sample_column_mask(cols, drop_rate, rng);
        for (c, _) in mask.iter().enumerate().filter(|(_, keep)| !**keep) {
            for r in 0..rows {
                out.data_mut()[(m * rows + r) * cols + c] += F::of(MASKED);
            }
        }
    }
    Ok(out)
}

/// (0 | MASKED) additive mask with whole columns dropped per matrix.
fn column_mask_tensor<F: Real>(
    shape: &[usize],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    let cols = shape[shape.len() - 1];
    let rows = shape[shape.len() - 2];
    let mats: usize = shape[..shape.len() - 2].iter().product();
    let mut t = Tensor::zeros(shape);
    for m in 0..mats {
        let mask = sample_column_mask(cols, rate, rng);
        for (c, _) in mask.iter().enumerate().filter(|(_, keep)| !**keep) {
            for r in 0..rows {
                t.data_mut()[(m * rows + r) * cols + c] = F::of(MASKED);
            }
        }
    }
    t
}

/// Contiguous frame windows of length `d_block`, the last one shorter when
/// T is not a multiple. Attention runs within each window independently.
pub fn tsa_block_partition(t: usize, d_block: usize) -> Result<Vec<Range<usize>>, ConfigError> {
    if d_block < 1 {
        return Err(ConfigError("d_block must be at least 1".into()));
    }
    Ok((0..t).step_by(d_block).map(|s| s..(s + d_block).min(t)).collect())
}

/// Projections and the batched attention computation shared by the spatial
/// and temporal sublayers (and the hybrid branches).
pub struct AttnCore<F: Real> {
    name: String,
    pub cfg: SelfAttentionConfig,
    wq: Tensor<F>,
    wk: Tensor<F>,
    wv: Tensor<F>,
    wo: Tensor<F>,
}

impl<F: Real> AttnCore<F> {
    pub fn set_drop_rate(&mut self, rate: f64) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ConfigError(format!("attention drop rate {rate} outside [0, 1)")));
        }
        self.cfg.drop_rate = rate;
        Ok(())
    }

    pub fn new(name: impl Into<String>, cfg: SelfAttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            name: name.into(),
            wq: init::fan_in_uniform(&[cfg.d_q_total, cfg.c_in], cfg.c_in, rng),
            wk: init::fan_in_uniform(&[cfg.d_k_total, cfg.c_in], cfg.c_in, rng),
            wv: init::fan_in_uniform(&[cfg.d_v_total, cfg.c_in], cfg.c_in, rng),
            wo: init::fan_in_uniform(&[cfg.c_out, cfg.d_v_total], cfg.d_v_total, rng),
            cfg,
        }
    }

    /// x (N, C_in, T, V) → (N, C_out, T, V), attending over joints within
    /// each frame or frames within each joint. `blocks` restricts frame
    /// attention to index windows (`None` = one full window). Scores are
    /// scaled by 1/√d_k per head; in train mode key columns are dropped.
    pub fn forward(
        &self,
        tape: &mut GradTape<F>,
        x: Var,
        axis: AttentionAxis,
        blocks: Option<&[Range<usize>]>,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let (n, _c, t, v) = dims4(tape.shape(x))?;
        let heads = self.cfg.heads;
        let (dqh, dvh) = (self.cfg.head_q(), self.cfg.head_v());

        let wq = tape.param(&format!("{}.wq", self.name), &self.wq);
        let wk = tape.param(&format!("{}.wk", self.name), &self.wk);
        let wv = tape.param(&format!("{}.wv", self.name), &self.wv);
        let wo = tape.param(&format!("{}.wo", self.name), &self.wo);

        let q = tape.channel_map(x, wq)?;
        let k = tape.channel_map(x, wk)?;
        let val = tape.channel_map(x, wv)?;
        let q = tape.reshape(q, &[n, heads, dqh, t, v])?;
        let k = tape.reshape(k, &[n, heads, dqh, t, v])?;
        let val = tape.reshape(val, &[n, heads, dvh, t, v])?;

        // Fold the non-attended axis next to the batch; keys arrive
        // pre-transposed for the score product.
        let (q, kt, val, fold, len) = match axis {
            AttentionAxis::Joints => (
                tape.permute(q, &[0, 3, 1, 4, 2])?,
                tape.permute(k, &[0, 3, 1, 2, 4])?,
                tape.permute(val, &[0, 3, 1, 4, 2])?,
                t,
                v,
            ),
            AttentionAxis::Frames => (
                tape.permute(q, &[0, 4, 1, 3, 2])?,
                tape.permute(k, &[0, 4, 1, 2, 3])?,
                tape.permute(val, &[0, 4, 1, 3, 2])?,
                v,
                t,
            ),
        };

        let full = [0..len];
        let windows: &[Range<usize>] = blocks.unwrap_or(&full);
        let scale = F::of(1.0 / (dqh as f64).sqrt());
        let dropping = ctx.mode == Mode::Train && self.cfg.drop_rate > 0.0;
        let mut captured =
            ctx.capture.is_some().then(|| Tensor::<F>::zeros(&[n, fold, heads, len, len]));

        let mut outs = Vec::with_capacity(windows.len());
        for w in windows {
            let lb = w.len();
            let whole = windows.len() == 1 && lb == len;
            let (qb, kb, vb) = if whole {
                (q, kt, val)
            } else {
                (
                    tape.slice_axis(q, 3, w.start, lb)?,
                    tape.slice_axis(kt, 4, w.start, lb)?,
                    tape.slice_axis(val, 3, w.start, lb)?,
                )
            };
            let scores = tape.matmul(qb, kb)?;
            let scores = tape.scale(scores, scale);
            if let Some(cap) = captured.as_mut() {
                let probs =
                    softmax_axis(tape.value(scores).data(), tape.shape(scores), 4);
                write_block(cap, &probs, n * fold * heads, len, w.start, lb);
            }
            let scores = if dropping {
                let rng = ctx.rng.as_deref_mut().expect("training attention needs an rng");
                let mask =
                    column_mask_tensor(&[n, fold, heads, lb, lb], self.cfg.drop_rate, rng);
                let mv = tape.input(&mask);
                tape.add(scores, mv)?
            } else {
                scores
            };
            let probs = tape.softmax(scores, 4)?;
            outs.push(tape.matmul(probs, vb)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 3)? };
        let back = match axis {
            AttentionAxis::Joints => tape.permute(merged, &[0, 2, 4, 1, 3])?,
            AttentionAxis::Frames => tape.permute(merged, &[0, 2, 4, 3, 1])?,
        };
        let stacked = tape.reshape(back, &[n, self.cfg.d_v_total, t, v])?;
        let y = tape.channel_map(stacked, wo)?;
        if let (Some(sink), Some(map)) = (ctx.capture.as_deref_mut(), captured) {
            sink.push(AttentionRecord { layer: self.name.clone(), axis, map });
        }
        Ok(y)
    }
}

/// Copies a per-window probability block onto the (len, len) diagonal of the
/// captured map; entries outside every window stay exactly zero.
fn write_block<F: Real>(
    cap: &mut Tensor<F>,
    probs: &[F],
    mats: usize,
    len: usize,
    start: usize,
    lb: usize,
) {
    for m in 0..mats {
        for r in 0..lb {
            let src = (m * lb + r) * lb;
            let dst = (m * len + start + r) * len + start;
            cap.data_mut()[dst..dst + lb].copy_from_slice(&probs[src..src + lb]);
        }
    }
}

impl<F: Real> Parameterized<F> for AttnCore<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.wq", self.name), &self.wq);
        f(&format!("{}.wk", self.name), &self.wk);
        f(&format!("{}.wv", self.name), &self.wv);
        f(&format!("{}.wo", self.name), &self.wo);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.wq", self.name), &mut self.wq);
        f(&format!("{}.wk", self.name), &mut self.wk);
        f(&format!("{}.wv", self.name), &mut self.wv);
        f(&format!("{}.wo", self.name), &mut self.wo);
    }
}

/// Spatial self-attention sublayer: normalizes the input, attends over
/// joints per frame, adds the shortcut.
pub struct SsaLayer<F: Real> {
    core: AttnCore<F>,
    bn: BatchNorm<F>,
    res: Residual<F>,
}

impl<F: Real> SsaLayer<F> {
    pub fn new(name: &str, cfg: SelfAttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            core: AttnCore::new(name, cfg, rng),
            bn: BatchNorm::new(format!("{name}.bn"), cfg.c_in),
            res: Residual::new(format!("{name}.res"), cfg.c_in, cfg.c_out, false, rng),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let xb = self.bn.forward(tape, x, ctx.mode)?;
        let y = self.core.forward(tape, xb, AttentionAxis::Joints, None, ctx)?;
        let r = self.res.forward(tape, x)?;
        tape.add(y, r)
    }

    pub fn core(&self) -> &AttnCore<F> {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut AttnCore<F> {
        &mut self.core
    }
}

impl<F: Real> Parameterized<F> for SsaLayer<F> {
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

/// Temporal self-attention sublayer: attends over frames per joint.
/// A stride subsamples frames first (the shortcut then uses a learned
/// projection); `d_block` windows the attention.
pub struct TsaLayer<F: Real> {
    core: AttnCore<F>,
    bn: BatchNorm<F>,
    res: Residual<F>,
    stride: usize,
    d_block: Option<usize>,
}

impl<F: Real> TsaLayer<F> {
    pub fn new(
        name: &str,
        cfg: SelfAttentionConfig,
        stride: usize,
        d_block: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ConfigError> {
        if stride == 0 {
            return Err(ConfigError("temporal stride must be at least 1".into()));
        }
        if d_block == Some(0) {
            return Err(ConfigError("d_block must be at least 1".into()));
        }
        Ok(Self {
            core: AttnCore::new(name, cfg, rng),
            bn: BatchNorm::new(format!("{name}.bn"), cfg.c_in),
            res: Residual::new(format!("{name}.res"), cfg.c_in, cfg.c_out, stride > 1, rng),
            stride,
            d_block,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let xs = if self.stride > 1 { tape.subsample(x, 2, self.stride)? } else { x };
        let xb = self.bn.forward(tape, xs, ctx.mode)?;
        let blocks = self
            .d_block
            .map(|d| tsa_block_partition(tape.shape(xs)[2], d).expect("validated d_block"));
        let y = self.core.forward(tape, xb, AttentionAxis::Frames, blocks.as_deref(), ctx)?;
        let r = self.res.forward(tape, xs)?;
        tape.add(y, r)
    }

    pub fn core(&self) -> &AttnCore<F> {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut AttnCore<F> {
        &mut self.core
    }
}

impl<F: Real> Parameterized<F> for TsaLayer<F> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn cfg(c_in: usize, c_out: usize, heads: usize) -> SelfAttentionConfig {
        SelfAttentionConfig::new(c_in, c_out, heads, ValueDim::FullOutput, 0.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SelfAttentionConfig::new(8, 8, 0, ValueDim::FullOutput, 0.0).is_err());
        assert!(SelfAttentionConfig::new(8, 6, 1, ValueDim::FullOutput, 0.0).is_err());
        assert!(SelfAttentionConfig::new(8, 8, 4, ValueDim::FullOutput, 0.0).is_err());
        assert!(SelfAttentionConfig::new(8, 8, 2, ValueDim::FullOutput, 1.0).is_err());
        let c = cfg(8, 8, 2);
        assert_eq!((c.d_q_total, c.d_v_total, c.head_q(), c.head_v()), (2, 8, 1, 4));
        let q = SelfAttentionConfig::new(8, 8, 2, ValueDim::QuarterOutput, 0.0).unwrap();
        assert_eq!(q.d_v_total, 2);
    }

    #[test]
    fn drop_attention_rate_zero_and_eval_are_identity() {
        let logits = Tensor::from_fn(&[3, 4, 5], |ix| (ix[0] + ix[1] * 2 + ix[2]) as f64 * 0.1);
        let mut r = rng();
        let out = drop_attention(&logits, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(out.data(), logits.data());
        let out = drop_attention(&logits, 0.7, Mode::Eval, &mut r).unwrap();
        assert_eq!(out.data(), logits.data());
        assert!(drop_attention(&logits, 1.0, Mode::Train, &mut r).is_err());
    }

    #[test]
    fn drop_attention_fraction_matches_rate() {
        // 2000 matrices x 50 columns = 1e5 columns at rate 0.5.
        let logits = Tensor::<f64>::zeros(&[2000, 2, 50]);
        let mut r = rng();
        let out = drop_attention(&logits, 0.5, Mode::Train, &mut r).unwrap();
        let mut dropped = 0usize;
        for m in 0..2000 {
            for c in 0..50 {
                if out.data()[(m * 2) * 50 + c] < -1e29 {
                    // Column drops apply to every row of the matrix.
                    assert!(out.data()[(m * 2 + 1) * 50 + c] < -1e29);
                    dropped += 1;
                }
            }
        }
        let frac = dropped as f64 / 1e5;
        assert!((0.49..=0.51).contains(&frac), "drop fraction {frac}");
    }

    #[test]
    fn drop_attention_always_leaves_a_survivor() {
        let logits = Tensor::<f64>::zeros(&[400, 1, 3]);
        let mut r = rng();
        let out = drop_attention(&logits, 0.9, Mode::Train, &mut r).unwrap();
        for m in 0..400 {
            let row = &out.data()[m * 3..(m + 1) * 3];
            assert!(row.iter().any(|&x| x > -1.0), "all columns dropped in {row:?}");
        }
    }

    #[test]
    fn block_partition_examples() {
        let b = tsa_block_partition(300, 10).unwrap();
        assert_eq!(b.len(), 30);
        assert!(b.iter().all(|r| r.len() == 10));
        assert_eq!(tsa_block_partition(7, 3).unwrap(), vec![0..3, 3..6, 6..7]);
        assert_eq!(tsa_block_partition(5, 5).unwrap(), vec![0..5]);
        assert!(tsa_block_partition(5, 0).is_err());
    }

    #[test]
    fn single_joint_attention_is_value_path() {
        // V=1: the softmax over one joint is 1, so the core reduces to
        // W_o(W_v x) per frame.
        let core = AttnCore::<f64>::new("a", cfg(4, 8, 2), &mut rng());
        let x = Tensor::from_fn(&[1, 4, 3, 1], |ix| (1 + ix[1] + ix[2]) as f64 * 0.2);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let y = core
            .forward(&mut tape, xv, AttentionAxis::Joints, None, &mut LayerCtx::eval())
            .unwrap();

        let mut t2 = GradTape::new();
        let x2 = t2.input(&x);
        let wv = t2.input(&core.wv);
        let wo = t2.input(&core.wo);
        let h = t2.channel_map(x2, wv).unwrap();
        let want = t2.channel_map(h, wo).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(t2.value(want).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_joints_attend_uniformly() {
        let core = AttnCore::<f64>::new("a", cfg(4, 8, 2), &mut rng());
        // Two joints with identical features in every frame.
        let x = Tensor::from_fn(&[1, 4, 2, 2], |ix| (ix[1] * 3 + ix[2]) as f64 * 0.25);
        let mut sink = Vec::new();
        let mut ctx = LayerCtx::capturing(&mut sink);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let y = core.forward(&mut tape, xv, AttentionAxis::Joints, None, &mut ctx).unwrap();

        let map = &sink[0].map;
        assert_eq!(map.shape(), &[1, 2, 2, 2, 2]);
        for m in map.data().chunks(4) {
            for p in m {
                assert!((p - 0.5).abs() < 1e-9, "expected uniform scores, got {m:?}");
            }
        }
        // Identical inputs produce identical output embeddings per joint.
        let out = tape.value(y);
        for c in 0..8 {
            for t in 0..2 {
                let base = (c * 2 + t) * 2;
                let d = (out.data()[base] - out.data()[base + 1]).abs();
                assert!(d < 1e-9);
            }
        }
    }

    #[test]
    fn constant_frames_give_uniform_temporal_scores() {
        let core = AttnCore::<f64>::new("a", cfg(4, 4, 1), &mut rng());
        let x = Tensor::from_fn(&[1, 4, 5, 2], |ix| (ix[1] + ix[3] * 2) as f64 * 0.3);
        let mut sink = Vec::new();
        let mut ctx = LayerCtx::capturing(&mut sink);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        core.forward(&mut tape, xv, AttentionAxis::Frames, None, &mut ctx).unwrap();
        let map = &sink[0].map;
        assert_eq!(map.shape(), &[1, 2, 1, 5, 5]);
        for p in map.data() {
            assert!((p - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn captured_rows_stay_stochastic_under_input_scaling() {
        let core = AttnCore::<f64>::new("a", cfg(4, 8, 2), &mut rng());
        for scale in [1.0, 3.0] {
            let x = Tensor::from_fn(&[2, 4, 3, 4], |ix| {
                ((ix[0] * 7 + ix[1] * 3 + ix[2] * 5 + ix[3]) % 11) as f64 * 0.2 * scale
            });
            let mut sink = Vec::new();
            let mut ctx = LayerCtx::capturing(&mut sink);
            let mut tape = GradTape::new();
            let xv = tape.input(&x);
            core.forward(&mut tape, xv, AttentionAxis::Joints, None, &mut ctx).unwrap();
            for row in sink[0].map.data().chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn block_tsa_with_full_block_matches_plain() {
        let core = AttnCore::<f64>::new("a", cfg(4, 8, 2), &mut rng());
        let x = Tensor::from_fn(&[1, 4, 6, 2], |ix| {
            ((ix[1] * 13 + ix[2] * 7 + ix[3] * 3) % 9) as f64 * 0.15 - 0.5
        });
        let run = |blocks: Option<&[Range<usize>]>| {
            let mut tape = GradTape::new();
            let xv = tape.input(&x);
            let y = core
                .forward(&mut tape, xv, AttentionAxis::Frames, blocks, &mut LayerCtx::eval())
                .unwrap();
            tape.value(y).clone()
        };
        let plain = run(None);
        let blocks = tsa_block_partition(6, 6).unwrap();
        let single = run(Some(&blocks));
        for (a, b) in plain.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn block_tsa_zeroes_cross_block_scores() {
        let core = AttnCore::<f64>::new("a", cfg(4, 8, 2), &mut rng());
        let x = Tensor::from_fn(&[1, 4, 7, 2], |ix| {
            ((ix[1] * 5 + ix[2] * 3 + ix[3]) % 8) as f64 * 0.2
        });
        let blocks = tsa_block_partition(7, 3).unwrap();
        let mut sink = Vec::new();
        let mut ctx = LayerCtx::capturing(&mut sink);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        core.forward(&mut tape, xv, AttentionAxis::Frames, Some(&blocks), &mut ctx).unwrap();
        let map = &sink[0].map;
        assert_eq!(map.shape(), &[1, 2, 2, 7, 7]);
        let block_of = |i: usize| blocks.iter().position(|r| r.contains(&i)).unwrap();
        for (cell, &p) in map.data().iter().enumerate() {
            let (row, col) = ((cell / 7) % 7, cell % 7);
            if block_of(row) != block_of(col) {
                assert_eq!(p, 0.0, "cross-block score at ({row},{col})");
            }
        }
        // Within-block rows are still distributions.
        for row_chunk in map.data().chunks(7) {
            let s: f64 = row_chunk.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn strided_tsa_halves_frames_and_projects_shortcut() {
        let mut layer = TsaLayer::<f64>::new("t", cfg(8, 8, 2), 2, None, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[1, 8, 6, 3], |ix| (ix[1] + ix[2] + ix[3]) as f64 * 0.1);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let y = layer.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 3, 3]);
        // Strided shortcut is a learned projection even at equal channels.
        assert!(layer.res.is_projected());
    }

    #[test]
    fn attention_core_parameter_count_is_closed_form() {
        let c = cfg(128, 128, 8);
        let core = AttnCore::<f64>::new("a", c, &mut rng());
        assert_eq!(
            core.param_count(),
            c.c_in * (c.d_q_total + c.d_k_total + c.d_v_total) + c.d_v_total * c.c_out
        );
    }
}
