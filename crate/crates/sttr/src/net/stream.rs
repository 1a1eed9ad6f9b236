//! Stream assembly and forward pass: input normalization, the configured
//! stack of spatial+temporal layers, global average pooling, and a linear
//! classifier. Also parameter accounting and attention-map extraction.

use rand_chacha::ChaCha8Rng;

use super::config::{AdjacencyKind, NetworkConfig, SpatialOp, StreamKind, TemporalOp};
use crate::error::{ConfigError, Error, TensorError};
use crate::graph::{AdjacencySet, SkeletonTopology};
use crate::layers::{
    AgcnLayer, AttentionAxis, AttentionRecord, AugSpatialLayer, AugTemporalLayer, GcnLayer,
    LayerCtx, SelfAttentionConfig, SsaLayer, TcnLayer, TsaLayer,
};
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{init, BatchNorm, Parameterized, Real, Tensor};

enum Spatial<F: Real> {
    Gcn(GcnLayer<F>),
    Agcn(AgcnLayer<F>),
    Ssa(SsaLayer<F>),
    Aug(AugSpatialLayer<F>),
}

enum Temporal<F: Real> {
    Tcn(TcnLayer<F>),
    Tsa(TsaLayer<F>),
    Aug(AugTemporalLayer<F>),
}

struct StreamLayer<F: Real> {
    spatial: Spatial<F>,
    temporal: Temporal<F>,
}

impl<F: Real> StreamLayer<F> {
    fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let h = match &mut self.spatial {
            Spatial::Gcn(l) => l.forward(tape, x, ctx)?,
            Spatial::Agcn(l) => l.forward(tape, x, ctx)?,
            Spatial::Ssa(l) => l.forward(tape, x, ctx)?,
            Spatial::Aug(l) => l.forward(tape, x, ctx)?,
        };
        match &mut self.temporal {
            Temporal::Tcn(l) => l.forward(tape, h, ctx),
            Temporal::Tsa(l) => l.forward(tape, h, ctx),
            Temporal::Aug(l) => l.forward(tape, h, ctx),
        }
    }

    fn set_drop_rate(&mut self, rate: f64) -> Result<(), ConfigError> {
        match &mut self.spatial {
            Spatial::Ssa(l) => l.core_mut().set_drop_rate(rate)?,
            Spatial::Aug(l) => l.attn_mut().set_drop_rate(rate)?,
            Spatial::Gcn(_) | Spatial::Agcn(_) => {}
        }
        match &mut self.temporal {
            Temporal::Tsa(l) => l.core_mut().set_drop_rate(rate)?,
            Temporal::Aug(l) => l.attn_mut().set_drop_rate(rate)?,
            Temporal::Tcn(_) => {}
        }
        Ok(())
    }
}

impl<F: Real> Parameterized<F> for StreamLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        match &self.spatial {
            Spatial::Gcn(l) => l.visit_params(f),
            Spatial::Agcn(l) => l.visit_params(f),
            Spatial::Ssa(l) => l.visit_params(f),
            Spatial::Aug(l) => l.visit_params(f),
        }
        match &self.temporal {
            Temporal::Tcn(l) => l.visit_params(f),
            Temporal::Tsa(l) => l.visit_params(f),
            Temporal::Aug(l) => l.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        match &mut self.spatial {
            Spatial::Gcn(l) => l.visit_params_mut(f),
            Spatial::Agcn(l) => l.visit_params_mut(f),
            Spatial::Ssa(l) => l.visit_params_mut(f),
            Spatial::Aug(l) => l.visit_params_mut(f),
        }
        match &mut self.temporal {
            Temporal::Tcn(l) => l.visit_params_mut(f),
            Temporal::Tsa(l) => l.visit_params_mut(f),
            Temporal::Aug(l) => l.visit_params_mut(f),
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        match &self.spatial {
            Spatial::Gcn(l) => l.visit_state(f),
            Spatial::Agcn(l) => l.visit_state(f),
            Spatial::Ssa(l) => l.visit_state(f),
            Spatial::Aug(l) => l.visit_state(f),
        }
        match &self.temporal {
            Temporal::Tcn(l) => l.visit_state(f),
            Temporal::Tsa(l) => l.visit_state(f),
            Temporal::Aug(l) => l.visit_state(f),
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        match &mut self.spatial {
            Spatial::Gcn(l) => l.visit_state_mut(f),
            Spatial::Agcn(l) => l.visit_state_mut(f),
            Spatial::Ssa(l) => l.visit_state_mut(f),
            Spatial::Aug(l) => l.visit_state_mut(f),
        }
        match &mut self.temporal {
            Temporal::Tcn(l) => l.visit_state_mut(f),
            Temporal::Tsa(l) => l.visit_state_mut(f),
            Temporal::Aug(l) => l.visit_state_mut(f),
        }
    }
}

/// One classification stream.
pub struct StreamModel<F: Real> {
    kind: StreamKind,
    v: usize,
    t: usize,
    c_in: usize,
    classes: usize,
    input_bn: Option<BatchNorm<F>>,
    layers: Vec<StreamLayer<F>>,
    fc_w: Tensor<F>,
    fc_b: Tensor<F>,
    capture: bool,
    has_agcn: bool,
}

/// Assembles a stream: the first `k` layers extract features with GCN+TCN,
/// the rest use the kind's operators (baselines keep theirs throughout).
pub fn build_stream<F: Real>(
    cfg: &NetworkConfig,
    kind: StreamKind,
    topo: &SkeletonTopology,
    rng: &mut ChaCha8Rng,
) -> Result<StreamModel<F>, Error> {
    if topo.v() != cfg.v {
        return Err(ConfigError(format!(
            "topology has {} joints but the network expects {}",
            topo.v(),
            cfg.v
        ))
        .into());
    }
    let adj = match cfg.adjacency {
        AdjacencyKind::Skeleton => AdjacencySet::build(topo, cfg.strategy)?,
        AdjacencyKind::FullyConnected => AdjacencySet::fully_connected(cfg.v),
    };
    let specs = cfg.layer_specs(kind)?;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let sn = format!("l{}.s", i + 1);
        let tn = format!("l{}.t", i + 1);
        let spatial = match spec.spatial {
            SpatialOp::Gcn => Spatial::Gcn(GcnLayer::new(&sn, &adj, spec.c_in, spec.c_out, rng)),
            SpatialOp::Agcn => {
                Spatial::Agcn(AgcnLayer::new(&sn, &adj, spec.c_in, spec.c_out, cfg.agcn, rng))
            }
            SpatialOp::Ssa => {
                let acfg = SelfAttentionConfig::new(
                    spec.c_in,
                    spec.c_out,
                    cfg.heads,
                    cfg.value_dim,
                    cfg.drop_rate,
                )?;
                Spatial::Ssa(SsaLayer::new(&sn, acfg, rng))
            }
            SpatialOp::AugGcn => Spatial::Aug(AugSpatialLayer::new(
                &sn,
                &adj,
                spec.c_in,
                spec.c_out,
                cfg.heads,
                cfg.drop_rate,
                rng,
            )?),
        };
        let temporal = match spec.temporal {
            TemporalOp::Tcn => Temporal::Tcn(TcnLayer::new(
                &tn,
                spec.c_out,
                spec.c_out,
                cfg.kernel_t,
                spec.stride,
                rng,
            )?),
            TemporalOp::Tsa => {
                let acfg = SelfAttentionConfig::new(
                    spec.c_out,
                    spec.c_out,
                    cfg.heads,
                    cfg.value_dim,
                    cfg.drop_rate,
                )?;
                Temporal::Tsa(TsaLayer::new(&tn, acfg, spec.stride, spec.d_block, rng)?)
            }
            TemporalOp::AugTcn => Temporal::Aug(AugTemporalLayer::new(
                &tn,
                spec.c_out,
                spec.c_out,
                cfg.kernel_t,
                spec.stride,
                cfg.heads,
                cfg.drop_rate,
                rng,
            )?),
        };
        layers.push(StreamLayer { spatial, temporal });
    }
    let c_last = specs.last().expect("validated nonempty").c_out;
    let has_agcn = specs.iter().any(|s| s.spatial == SpatialOp::Agcn);
    Ok(StreamModel {
        kind,
        v: cfg.v,
        t: cfg.t,
        c_in: cfg.c_in,
        classes: cfg.classes,
        input_bn: cfg.input_bn.then(|| BatchNorm::new("in_bn", cfg.c_in * cfg.v)),
        layers,
        fc_w: init::fan_in_uniform(&[cfg.classes, c_last], c_last, rng),
        fc_b: Tensor::zeros(&[cfg.classes]),
        capture: cfg.capture,
        has_agcn,
    })
}

impl<F: Real> StreamModel<F> {
    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.c_in, self.t, self.v)
    }

    pub fn has_agcn(&self) -> bool {
        self.has_agcn
    }

    pub fn capture_enabled(&self) -> bool {
        self.capture
    }

    pub fn set_drop_rate(&mut self, rate: f64) -> Result<(), ConfigError> {
        for layer in &mut self.layers {
            layer.set_drop_rate(rate)?;
        }
        Ok(())
    }

    /// x (N, C_in, T, V) → logits (N, classes). Attention maps flow into
    /// `ctx.capture` when a sink is attached.
    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.c_in || s[2] != self.t || s[3] != self.v {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!(
                    "stream expects (N, {}, {}, {}) input",
                    self.c_in, self.t, self.v
                ),
            });
        }
        let n = s[0];
        let mut h = x;
        if let Some(bn) = &mut self.input_bn {
            // Normalize each (channel, joint) pair over batch and time.
            let p = tape.permute(h, &[0, 1, 3, 2])?;
            let flat = tape.reshape(p, &[n, self.c_in * self.v, self.t])?;
            let normed = bn.forward(tape, flat, ctx.mode)?;
            let back = tape.reshape(normed, &[n, self.c_in, self.v, self.t])?;
            h = tape.permute(back, &[0, 1, 3, 2])?;
        }
        for layer in &mut self.layers {
            h = layer.forward(tape, h, ctx)?;
        }
        let pooled = tape.mean_axes(h, &[2, 3])?;
        let w = tape.param("fc.w", &self.fc_w);
        let b = tape.param("fc.b", &self.fc_b);
        let logits = tape.channel_map(pooled, w)?;
        tape.bias_add(logits, b, 1)
    }
}

impl<F: Real> Parameterized<F> for StreamModel<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        if let Some(bn) = &self.input_bn {
            bn.visit_params(f);
        }
        for layer in &self.layers {
            layer.visit_params(f);
        }
        f("fc.w", &self.fc_w);
        f("fc.b", &self.fc_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        if let Some(bn) = &mut self.input_bn {
            bn.visit_params_mut(f);
        }
        for layer in &mut self.layers {
            layer.visit_params_mut(f);
        }
        f("fc.w", &mut self.fc_w);
        f("fc.b", &mut self.fc_b);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        if let Some(bn) = &self.input_bn {
            bn.visit_state(f);
        }
        for layer in &self.layers {
            layer.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        if let Some(bn) = &mut self.input_bn {
            bn.visit_state_mut(f);
        }
        for layer in &mut self.layers {
            layer.visit_state_mut(f);
        }
    }
}

/// Learnable-scalar totals, grouped by the name segment before the first
/// dot (input BN, each layer, the classifier), in visit order.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

pub fn count_parameters<F: Real>(model: &impl Parameterized<F>) -> ParamReport {
    let mut total = 0usize;
    let mut groups: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, t| {
        total += t.numel();
        let key = name.split('.').next().unwrap_or(name);
        match groups.iter_mut().find(|(g, _)| g == key) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((key.to_string(), t.numel())),
        }
    });
    ParamReport { total, groups }
}

/// Everything captured from one forward pass of a single sample.
pub struct AttentionMaps<F: Real> {
    /// Raw per-layer records: (1, T, H, V, V) for joint attention,
    /// (1, V, H, T, T) for frame attention.
    pub records: Vec<AttentionRecord<F>>,
    /// Per layer: the record averaged over heads and the folded axis.
    pub summaries: Vec<AttentionSummary<F>>,
    /// Column sums of the last joint-attention summary, scaled to max 1;
    /// None when the stream has no joint-attention layer.
    pub joint_relevance: Option<Vec<F>>,
}

pub struct AttentionSummary<F: Real> {
    pub layer: String,
    pub axis: AttentionAxis,
    pub averaged: Tensor<F>,
}

/// Head- and fold-averaged square map of one record.
pub fn average_record<F: Real>(record: &AttentionRecord<F>) -> Tensor<F> {
    let s = record.map.shape();
    let (n, fold, heads, len) = (s[0], s[1], s[2], s[3]);
    let mats = n * fold * heads;
    let mut out = vec![F::zero(); len * len];
    for m in 0..mats {
        let base = m * len * len;
        for (o, v) in out.iter_mut().zip(&record.map.data()[base..base + len * len]) {
            *o += *v;
        }
    }
    let inv = F::one() / F::of(mats as f64);
    for o in &mut out {
        *o *= inv;
    }
    Tensor::from_parts(vec![len, len], out)
}

/// Runs one sample (C, T, V) through the model in eval mode and returns the
/// recorded attention, per-layer averages, and per-joint relevance scores.
pub fn extract_attention_maps<F: Real>(
    model: &mut StreamModel<F>,
    sample: &Tensor<F>,
) -> Result<AttentionMaps<F>, Error> {
    if !model.capture_enabled() {
        return Err(ConfigError(
            "attention capture is disabled for this model; rebuild with capture on".into(),
        )
        .into());
    }
    let (c, t, v) = model.input_dims();
    if sample.shape() != [c, t, v] {
        return Err(TensorError::InvalidShape {
            shape: sample.shape().to_vec(),
            reason: format!("attention extraction wants one ({c}, {t}, {v}) sample"),
        }
        .into());
    }
    let batched = Tensor::from_parts(vec![1, c, t, v], sample.data().to_vec());
    let mut records = Vec::new();
    let mut tape = GradTape::new();
    let xv = tape.input(&batched);
    let mut ctx = LayerCtx::capturing(&mut records);
    model.forward(&mut tape, xv, &mut ctx)?;

    let summaries: Vec<AttentionSummary<F>> = records
        .iter()
        .map(|r| AttentionSummary {
            layer: r.layer.clone(),
            axis: r.axis,
            averaged: average_record(r),
        })
        .collect();
    let joint_relevance = summaries
        .iter()
        .rev()
        .find(|s| s.axis == AttentionAxis::Joints)
        .map(|s| {
            let m = &s.averaged;
            let v = m.shape()[0];
            let mut sums = vec![F::zero(); v];
            for r in 0..v {
                for (c, sum) in sums.iter_mut().enumerate() {
                    *sum += m.data()[r * v + c];
                }
            }
            let max = sums.iter().cloned().fold(F::zero(), F::max);
            if max > F::zero() {
                for s in &mut sums {
                    *s /= max;
                }
            }
            sums
        });
    Ok(AttentionMaps { records, summaries, joint_relevance })
}
