//! Named 64-bit finite-difference gradient checks for every tape operation,
//! every layer type, and a miniature end-to-end stream. The suite backs the
//! `gradcheck` command; a fault hook flips one check's analytic pass so the
//! harness itself can be shown to catch broken gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{AdjacencySet, PartitionStrategy, SkeletonTopology};
use crate::layers::{
    AgcnLayer, AgcnOptions, AugSpatialLayer, AugTemporalLayer, GcnLayer, LayerCtx,
    SelfAttentionConfig, SsaLayer, TcnLayer, TsaLayer, ValueDim,
};
use crate::net::{build_stream, NetworkConfig, StreamKind};
use crate::tensor::check::{grad_check_inputs, grad_check_model, GradReport, DEFAULT_EPS};
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{BatchNorm, Mode, Parameterized, Tensor};

/// A check passes when its max relative error stays below this.
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Tensor,
    Layers,
    Network,
}

impl CheckModule {
    pub fn label(self) -> &'static str {
        match self {
            CheckModule::Tensor => "tensor",
            CheckModule::Layers => "layers",
            CheckModule::Network => "network",
        }
    }
}

type CheckFn = fn(bool) -> Result<GradReport, TensorError>;

pub struct Check {
    pub name: &'static str,
    pub module: CheckModule,
    run: CheckFn,
}

/// Result of one named check.
#[derive(Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub module: CheckModule,
    pub result: Result<GradReport, TensorError>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.max_rel_err < GRAD_TOL)
    }

    pub fn max_rel_err(&self) -> f64 {
        match &self.result {
            Ok(r) => r.max_rel_err,
            Err(_) => f64::INFINITY,
        }
    }
}

/// Runs the suite, optionally restricted to one module. `fault` names a
/// check whose analytic pass gets a deliberate sign flip — a self-test that
/// the finite differences would catch a broken backward rule.
pub fn run_checks(filter: Option<CheckModule>, fault: Option<&str>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|c| filter.is_none_or(|m| c.module == m))
        .map(|c| CheckOutcome {
            name: c.name,
            module: c.module,
            result: (c.run)(fault == Some(c.name)),
        })
        .collect()
}

pub const CHECKS: &[Check] = &[
    Check { name: "add", module: CheckModule::Tensor, run: check_add },
    Check { name: "add_broadcast", module: CheckModule::Tensor, run: check_add_broadcast },
    Check { name: "bias_add", module: CheckModule::Tensor, run: check_bias_add },
    Check { name: "mul", module: CheckModule::Tensor, run: check_mul },
    Check { name: "scale", module: CheckModule::Tensor, run: check_scale },
    Check { name: "relu", module: CheckModule::Tensor, run: check_relu },
    Check { name: "matmul", module: CheckModule::Tensor, run: check_matmul },
    Check { name: "channel_map", module: CheckModule::Tensor, run: check_channel_map },
    Check { name: "conv_time", module: CheckModule::Tensor, run: check_conv_time },
    Check { name: "batch_norm_train", module: CheckModule::Tensor, run: check_batch_norm_train },
    Check { name: "channel_affine", module: CheckModule::Tensor, run: check_channel_affine },
    Check { name: "softmax", module: CheckModule::Tensor, run: check_softmax },
    Check { name: "cross_entropy", module: CheckModule::Tensor, run: check_cross_entropy },
    Check { name: "permute", module: CheckModule::Tensor, run: check_permute },
    Check { name: "reshape", module: CheckModule::Tensor, run: check_reshape },
    Check { name: "concat", module: CheckModule::Tensor, run: check_concat },
    Check { name: "slice_axis", module: CheckModule::Tensor, run: check_slice_axis },
    Check { name: "subsample", module: CheckModule::Tensor, run: check_subsample },
    Check { name: "mean_axes", module: CheckModule::Tensor, run: check_mean_axes },
    Check { name: "gcn_layer", module: CheckModule::Layers, run: check_gcn_layer },
    Check { name: "agcn_layer", module: CheckModule::Layers, run: check_agcn_layer },
    Check { name: "tcn_layer", module: CheckModule::Layers, run: check_tcn_layer },
    Check { name: "batch_norm_layer", module: CheckModule::Layers, run: check_bn_layer },
    Check { name: "ssa_layer", module: CheckModule::Layers, run: check_ssa_layer },
    Check { name: "tsa_layer", module: CheckModule::Layers, run: check_tsa_layer },
    Check { name: "aug_spatial_layer", module: CheckModule::Layers, run: check_aug_spatial },
    Check { name: "aug_temporal_layer", module: CheckModule::Layers, run: check_aug_temporal },
    Check { name: "two_layer_network", module: CheckModule::Network, run: check_network },
];

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept away from zero so no relu kink sits inside the probe step.
fn seeded_margin(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        v + 0.05 * v.signum()
    })
}

/// Deterministic non-uniform weighting so index mix-ups change the loss.
fn weighted(tape: &mut GradTape<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let mut k = 0.0f64;
    let w = Tensor::from_fn(&shape, |_| {
        k += 1.0;
        (k * 0.7).sin() + 0.1
    });
    let wv = tape.input(&w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum_all(p))
}

/// Negates the first (analytic) evaluation when `fault` is set.
fn flip(tape: &mut GradTape<f64>, loss: Var, fault: bool, first: &mut bool) -> Var {
    if fault && std::mem::take(first) {
        tape.scale(loss, -1.0)
    } else {
        loss
    }
}

fn check_inputs(
    inputs: &[Tensor<f64>],
    fault: bool,
    mut f: impl FnMut(&mut GradTape<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Result<GradReport, TensorError> {
    let mut first = true;
    grad_check_inputs(
        inputs,
        &mut |tape, vars| {
            let y = f(tape, vars)?;
            let loss = weighted(tape, y)?;
            Ok(flip(tape, loss, fault, &mut first))
        },
        DEFAULT_EPS,
    )
}

fn check_layer<M: Parameterized<f64>>(
    mut model: M,
    input: Tensor<f64>,
    fault: bool,
    mut f: impl FnMut(&mut GradTape<f64>, &mut M, Var, &mut LayerCtx<'_, f64>) -> Result<Var, TensorError>,
) -> Result<GradReport, TensorError> {
    let mut first = true;
    grad_check_model(
        &mut model,
        &[input],
        &mut |tape, m, vars| {
            let mut ctx = LayerCtx::eval();
            ctx.mode = Mode::Train;
            let y = f(tape, m, vars[0], &mut ctx)?;
            let loss = weighted(tape, y)?;
            Ok(flip(tape, loss, fault, &mut first))
        },
        DEFAULT_EPS,
    )
}

fn check_add(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3], 1), seeded(&[2, 3], 2)], fault, |t, v| t.add(v[0], v[1]))
}

fn check_add_broadcast(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4], 3), seeded(&[3, 4], 4)], fault, |t, v| {
        t.add_broadcast(v[0], v[1])
    })
}

fn check_bias_add(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4], 5), seeded(&[3], 6)], fault, |t, v| {
        t.bias_add(v[0], v[1], 1)
    })
}

fn check_mul(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[3, 4], 7), seeded(&[3, 4], 8)], fault, |t, v| t.mul(v[0], v[1]))
}

fn check_scale(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 5], 9)], fault, |t, v| Ok(t.scale(v[0], -1.7)))
}

fn check_relu(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded_margin(&[3, 5], 10)], fault, |t, v| Ok(t.relu(v[0])))
}

fn check_matmul(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4], 11), seeded(&[2, 4, 5], 12)], fault, |t, v| {
        t.matmul(v[0], v[1])
    })
}

fn check_channel_map(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4, 5], 13), seeded(&[6, 3], 14)], fault, |t, v| {
        t.channel_map(v[0], v[1])
    })
}

fn check_conv_time(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 7, 2], 15), seeded(&[4, 3, 3, 1], 16)], fault, |t, v| {
        t.conv_time(v[0], v[1], 2, 1)
    })
}

fn check_batch_norm_train(fault: bool) -> Result<GradReport, TensorError> {
    let inputs = [seeded(&[3, 4, 5], 17), seeded(&[4], 18), seeded(&[4], 19)];
    check_inputs(&inputs, fault, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
}

fn check_channel_affine(fault: bool) -> Result<GradReport, TensorError> {
    let scale: Vec<f64> = (0..4).map(|i| 0.5 + 0.3 * i as f64).collect();
    let shift: Vec<f64> = (0..4).map(|i| -0.2 * i as f64).collect();
    check_inputs(&[seeded(&[2, 4, 3], 20)], fault, move |t, v| {
        t.channel_affine(v[0], &scale, &shift)
    })
}

fn check_softmax(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 5], 21)], fault, |t, v| t.softmax(v[0], 2))
}

fn check_cross_entropy(fault: bool) -> Result<GradReport, TensorError> {
    let mut first = true;
    grad_check_inputs(
        &[seeded(&[4, 3], 22)],
        &mut |tape, vars| {
            let loss = tape.cross_entropy(vars[0], &[0, 2, 1, 2])?;
            Ok(flip(tape, loss, fault, &mut first))
        },
        DEFAULT_EPS,
    )
}

fn check_permute(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4, 5], 23)], fault, |t, v| t.permute(v[0], &[0, 3, 1, 2]))
}

fn check_reshape(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4], 24)], fault, |t, v| t.reshape(v[0], &[6, 4]))
}

fn check_concat(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 2, 3], 25), seeded(&[2, 4, 3], 26)], fault, |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })
}

fn check_slice_axis(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 6, 3], 27)], fault, |t, v| t.slice_axis(v[0], 1, 2, 3))
}

fn check_subsample(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 8, 2], 28)], fault, |t, v| t.subsample(v[0], 2, 2))
}

fn check_mean_axes(fault: bool) -> Result<GradReport, TensorError> {
    check_inputs(&[seeded(&[2, 3, 4, 5], 29)], fault, |t, v| t.mean_axes(v[0], &[2, 3]))
}

fn star5() -> SkeletonTopology {
    SkeletonTopology::new(5, vec![(0, 1), (1, 2), (2, 3), (2, 4)], 2).unwrap()
}

fn adj5() -> AdjacencySet {
    AdjacencySet::build(&star5(), PartitionStrategy::Spatial).unwrap()
}

fn check_gcn_layer(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let layer: GcnLayer<f64> = GcnLayer::new("g", &adj5(), 3, 4, &mut rng);
    check_layer(layer, seeded_margin(&[2, 3, 4, 5], 31), fault, |t, m, x, ctx| {
        m.forward(t, x, ctx)
    })
}

fn check_agcn_layer(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let layer: AgcnLayer<f64> =
        AgcnLayer::new("a", &adj5(), 3, 4, AgcnOptions::default(), &mut rng);
    check_layer(layer, seeded_margin(&[2, 3, 4, 5], 33), fault, |t, m, x, ctx| {
        m.forward(t, x, ctx)
    })
}

fn check_tcn_layer(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let layer: TcnLayer<f64> = TcnLayer::new("t", 3, 4, 3, 2, &mut rng).expect("odd kernel");
    check_layer(layer, seeded_margin(&[2, 3, 6, 4], 35), fault, |t, m, x, ctx| {
        m.forward(t, x, ctx)
    })
}

fn check_bn_layer(fault: bool) -> Result<GradReport, TensorError> {
    let bn: BatchNorm<f64> = BatchNorm::new("bn", 4);
    check_layer(bn, seeded(&[3, 4, 5], 36), fault, |t, m, x, ctx| t_forward_bn(t, m, x, ctx))
}

fn t_forward_bn(
    tape: &mut GradTape<f64>,
    bn: &mut BatchNorm<f64>,
    x: Var,
    ctx: &mut LayerCtx<'_, f64>,
) -> Result<Var, TensorError> {
    bn.forward(tape, x, ctx.mode)
}

fn attn_cfg(c_in: usize, c_out: usize, heads: usize) -> SelfAttentionConfig {
    SelfAttentionConfig::new(c_in, c_out, heads, ValueDim::FullOutput, 0.0)
        .expect("static check config")
}

fn check_ssa_layer(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let layer: SsaLayer<f64> = SsaLayer::new("s", attn_cfg(4, 8, 2), &mut rng);
    check_layer(layer, seeded(&[2, 4, 3, 5], 38), fault, |t, m, x, ctx| m.forward(t, x, ctx))
}

fn check_tsa_layer(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let layer: TsaLayer<f64> =
        TsaLayer::new("f", attn_cfg(4, 8, 2), 2, Some(2), &mut rng).expect("static check config");
    check_layer(layer, seeded(&[2, 4, 8, 3], 40), fault, |t, m, x, ctx| m.forward(t, x, ctx))
}

fn check_aug_spatial(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let layer: AugSpatialLayer<f64> =
        AugSpatialLayer::new("as", &adj5(), 3, 16, 2, 0.0, &mut rng).expect("static check config");
    check_layer(layer, seeded_margin(&[2, 3, 3, 5], 42), fault, |t, m, x, ctx| {
        m.forward(t, x, ctx)
    })
}

fn check_aug_temporal(fault: bool) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let layer: AugTemporalLayer<f64> =
        AugTemporalLayer::new("at", 3, 16, 3, 2, 2, 0.0, &mut rng).expect("static check config");
    check_layer(layer, seeded_margin(&[2, 3, 6, 4], 44), fault, |t, m, x, ctx| {
        m.forward(t, x, ctx)
    })
}

fn check_network(fault: bool) -> Result<GradReport, TensorError> {
    let cfg = NetworkConfig {
        v: 5,
        t: 6,
        c_in: 3,
        classes: 3,
        channels: vec![8, 8],
        strides: Some(vec![1, 2]),
        k: 0,
        heads: 2,
        kernel_t: 3,
        drop_rate: 0.0,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut model = build_stream::<f64>(&cfg, StreamKind::StTr1s, &star5(), &mut rng)
        .expect("static check config");
    let mut first = true;
    grad_check_model(
        &mut model,
        &[seeded(&[2, 3, 6, 5], 46)],
        &mut |tape, m, vars| {
            let mut ctx = LayerCtx::eval();
            ctx.mode = Mode::Train;
            let logits = m.forward(tape, vars[0], &mut ctx)?;
            let loss = tape.cross_entropy(logits, &[0, 2])?;
            Ok(flip(tape, loss, fault, &mut first))
        },
        DEFAULT_EPS,
    )
}
