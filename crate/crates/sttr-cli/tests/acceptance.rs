//! Acceptance gate for the whole workspace: ten numbered end-to-end checks
//! covering parameter budgets, batched-vs-loop oracle agreement, gradient
//! health, permutation symmetry, synthetic-task learning, score fusion, the
//! learning-rate schedule, attention export, and windowed temporal
//! attention. Each check prints a single `[accept]` line (visible under
//! `cargo test -- --nocapture`) and fails loudly otherwise.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use sttr::data::{generate_synthetic, prepare_examples, Archetype, Features};
use sttr::export::{read_matrix_csv, read_pgm, write_matrix_csv, write_pgm};
use sttr::graph::{AdjacencySet, PartitionStrategy, SkeletonTopology};
use sttr::layers::{
    tsa_block_partition, AttentionAxis, AttentionRecord, AttnCore, GcnCore, LayerCtx,
    SelfAttentionConfig, SsaLayer, TcnCore, TsaLayer, ValueDim,
};
use sttr::net::{
    add_scores, build_stream, count_parameters, evaluate, extract_attention_maps, fuse_streams,
    metrics_from_scores, train, Example, NetworkConfig, StreamKind, StreamModel, TrainConfig,
};
use sttr::tensor::tape::GradTape;
use sttr::tensor::{Parameterized, Tensor};
use sttr::verify::{run_checks, GRAD_TOL};

fn report(id: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("[accept] {id}: PASS — {detail}"),
        Err(msg) => {
            println!("[accept] {id}: FAIL — {msg}");
            panic!("{id}: {msg}");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Full-scale stream totals stay inside ±20% of the reference budgets
/// (units of 1e5 learnable scalars), with the expected ordering.
#[test]
fn criterion_01_parameter_budgets() {
    let run = || -> Result<String, String> {
        let start = Instant::now();
        let cfg = NetworkConfig::default();
        let topo = SkeletonTopology::ntu25();
        let total = |kind: StreamKind| -> Result<usize, String> {
            let m: StreamModel<f32> =
                build_stream(&cfg, kind, &topo, &mut rng(0)).map_err(|e| e.to_string())?;
            Ok(count_parameters(&m).total)
        };
        let budgets = [
            (StreamKind::StGcn, 31.0e5),
            (StreamKind::STr, 30.7e5),
            (StreamKind::TTr, 17.6e5),
            (StreamKind::Agcn1s, 34.7e5),
            (StreamKind::StTr1s, 17.4e5),
        ];
        let mut detail = String::new();
        let mut got = std::collections::HashMap::new();
        for (kind, budget) in budgets {
            let n = total(kind)?;
            let off = n as f64 / budget - 1.0;
            if off.abs() > 0.20 {
                return Err(format!(
                    "{} has {n} learnable scalars, {:+.1}% from the {budget:.0} budget",
                    kind.label(),
                    off * 100.0
                ));
            }
            detail.push_str(&format!("{} {n} ({:+.1}%), ", kind.label(), off * 100.0));
            got.insert(kind.label(), n);
        }
        if !(got["s-tr"] < got["st-gcn"] && got["st-gcn"] < got["agcn-1s"]) {
            return Err(format!("expected s-tr < st-gcn < agcn-1s, got {got:?}"));
        }
        if got["t-tr"] as f64 >= 0.6 * got["st-gcn"] as f64 {
            return Err(format!("t-tr should undercut 60% of st-gcn, got {got:?}"));
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 1.0 {
            return Err(format!("took {elapsed:.2?}, budget is 1s"));
        }
        Ok(format!("{detail}in {elapsed:.1?}"))
    };
    report("01 parameter-budgets", run());
}

/// A temporal-attention core undercuts a temporal-convolution core by
/// 14e5..20e5 scalars at 512 channels, and the gap widens with width.
#[test]
fn criterion_02_conv_vs_attention_core_gap() {
    let run = || -> Result<String, String> {
        let start = Instant::now();
        let mut r = rng(0);
        let mut gaps = Vec::new();
        for c in [64usize, 128, 256, 512] {
            let tcn: TcnCore<f32> =
                TcnCore::new("t", c, c, 9, 1, &mut r).map_err(|e| e.to_string())?;
            let acfg = SelfAttentionConfig::new(c, c, 8, ValueDim::FullOutput, 0.0)
                .map_err(|e| e.to_string())?;
            let tsa: AttnCore<f32> = AttnCore::new("a", acfg, &mut r);
            gaps.push(count_parameters(&tcn).total as i64 - count_parameters(&tsa).total as i64);
        }
        let at512 = *gaps.last().unwrap();
        if !(1_400_000..=2_000_000).contains(&at512) {
            return Err(format!("gap at 512 channels is {at512}, outside [14e5, 20e5]"));
        }
        if !gaps.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("gap should grow with width, got {gaps:?}"));
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 1.0 {
            return Err(format!("took {elapsed:.2?}, budget is 1s"));
        }
        Ok(format!("gaps {gaps:?} over 64..512 channels, in {elapsed:.1?}"))
    };
    report("02 conv-attention-gap", run());
}

/// Naive per-pair attention, one (query, key) dot product at a time.
fn attention_oracle(
    x: &Tensor<f64>,
    core: &AttnCore<f64>,
    heads: usize,
    axis: AttentionAxis,
    blocks: Option<&[Range<usize>]>,
) -> Tensor<f64> {
    let (n, c, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut w = std::collections::HashMap::new();
    core.visit_params(&mut |name: &str, t: &Tensor<f64>| {
        w.insert(name.rsplit('.').next().unwrap().to_string(), t.clone());
    });
    let (wq, wk, wv, wo) = (&w["wq"], &w["wk"], &w["wv"], &w["wo"]);
    let (dq, dv, c_out) = (wq.shape()[0], wv.shape()[0], wo.shape()[0]);
    let (dqh, dvh) = (dq / heads, dv / heads);

    let proj = |wm: &Tensor<f64>, h: usize, dh: usize, ni: usize, ti: usize, vi: usize| {
        (h * dh..(h + 1) * dh)
            .map(|row| (0..c).map(|ci| wm.at(&[row, ci]) * x.at(&[ni, ci, ti, vi])).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let (len, fold) = match axis {
        AttentionAxis::Joints => (v, t),
        AttentionAxis::Frames => (t, v),
    };
    let coord = |pos: usize, fi: usize| match axis {
        AttentionAxis::Joints => (fi, pos),
        AttentionAxis::Frames => (pos, fi),
    };
    let full = [0..len];
    let windows = blocks.unwrap_or(&full);

    let mut z = vec![0.0; n * dv * t * v];
    for ni in 0..n {
        for fi in 0..fold {
            for h in 0..heads {
                let at = |p: usize, wm: &Tensor<f64>, dh: usize| {
                    let (ti, vi) = coord(p, fi);
                    proj(wm, h, dh, ni, ti, vi)
                };
                let q: Vec<_> = (0..len).map(|p| at(p, wq, dqh)).collect();
                let k: Vec<_> = (0..len).map(|p| at(p, wk, dqh)).collect();
                let val: Vec<_> = (0..len).map(|p| at(p, wv, dvh)).collect();
                for win in windows {
                    for u in win.clone() {
                        let logits: Vec<f64> = win
                            .clone()
                            .map(|a| {
                                let dot: f64 = q[u].iter().zip(&k[a]).map(|(x, y)| x * y).sum();
                                dot / (dqh as f64).sqrt()
                            })
                            .collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for d in 0..dvh {
                            let o: f64 = win
                                .clone()
                                .zip(&exps)
                                .map(|(a, &e)| e / sum * val[a][d])
                                .sum();
                            let (ti, vi) = coord(u, fi);
                            z[((ni * dv + h * dvh + d) * t + ti) * v + vi] = o;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_fn(&[n, c_out, t, v], |ix| {
        (0..dv)
            .map(|d| wo.at(&[ix[1], d]) * z[((ix[0] * dv + d) * t + ix[2]) * v + ix[3]])
            .sum()
    })
}

fn run_attention(
    core: &AttnCore<f64>,
    x: &Tensor<f64>,
    axis: AttentionAxis,
    blocks: Option<&[Range<usize>]>,
) -> Tensor<f64> {
    let mut tape = GradTape::new();
    let xv = tape.input(x);
    let y = core.forward(&mut tape, xv, axis, blocks, &mut LayerCtx::eval()).unwrap();
    tape.value(y).clone()
}

/// Batched spatial and temporal attention agree with the per-pair loops on
/// randomized shapes to 1e-9.
#[test]
fn criterion_03_attention_oracles() {
    let run = || -> Result<String, String> {
        let start = Instant::now();
        let mut r = rng(29);
        let mut worst = 0.0f64;
        let mut cases = 0usize;
        for axis in [AttentionAxis::Joints, AttentionAxis::Frames] {
            for _ in 0..12 {
                let heads = [1, 2, 4][r.gen_range(0..3)];
                let c_out = 4 * heads * r.gen_range(1..=3);
                let c_in = r.gen_range(2..=6);
                let (n, t, v) = (r.gen_range(1..=3), r.gen_range(1..=7), r.gen_range(1..=8));
                let vd =
                    if r.gen_bool(0.5) { ValueDim::FullOutput } else { ValueDim::QuarterOutput };
                let cfg = SelfAttentionConfig::new(c_in, c_out, heads, vd, 0.0)
                    .map_err(|e| e.to_string())?;
                let core = AttnCore::<f64>::new("a", cfg, &mut r);
                let x = rand_tensor(&[n, c_in, t, v], &mut r);
                let blocks = (axis == AttentionAxis::Frames && r.gen_bool(0.5))
                    .then(|| tsa_block_partition(t, r.gen_range(1..=t)).unwrap());
                let got = run_attention(&core, &x, axis, blocks.as_deref());
                let want = attention_oracle(&x, &core, heads, axis, blocks.as_deref());
                let d = max_abs_diff(&got, &want);
                worst = worst.max(d);
                cases += 1;
                if d > 1e-9 {
                    return Err(format!(
                        "{axis:?} case (n={n} c={c_in}->{c_out} h={heads} t={t} v={v}) \
                         differs from the loop oracle by {d:e}"
                    ));
                }
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 10.0 {
            return Err(format!("took {elapsed:.2?}, budget is 10s"));
        }
        Ok(format!("{cases} randomized shapes, worst |Δ| {worst:.1e}, in {elapsed:.1?}"))
    };
    report("03 attention-oracles", run());
}

/// The 64-bit finite-difference suite covers every layer and a full
/// two-layer network, all under the 1e-6 relative-error gate.
#[test]
fn criterion_04_gradient_suite() {
    let run = || -> Result<String, String> {
        let start = Instant::now();
        let outcomes = run_checks(None, None);
        let required = [
            "gcn_layer", "agcn_layer", "tcn_layer", "batch_norm_layer", "ssa_layer",
            "tsa_layer", "aug_spatial_layer", "aug_temporal_layer", "two_layer_network",
        ];
        for name in required {
            if !outcomes.iter().any(|o| o.name == name) {
                return Err(format!("the suite is missing the {name} check"));
            }
        }
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for o in &outcomes {
            match &o.result {
                Ok(rep) => {
                    worst = worst.max(rep.max_rel_err);
                    checked += rep.checked;
                    if rep.max_rel_err >= GRAD_TOL {
                        return Err(format!(
                            "{} gradient off by {:e} at {}",
                            o.name, rep.max_rel_err, rep.worst
                        ));
                    }
                }
                Err(e) => return Err(format!("{} failed to run: {e}", o.name)),
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 120.0 {
            return Err(format!("took {elapsed:.2?}, budget is 2min"));
        }
        Ok(format!(
            "{} checks / {checked} gradients, worst rel err {worst:.1e}, in {elapsed:.1?}",
            outcomes.len()
        ))
    };
    report("04 gradient-suite", run());
}

/// out[.., j, ..] = x[.., perm[j], ..] along `axis`.
fn permute_axis(x: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |ix| {
        let mut src = ix.to_vec();
        src[axis] = perm[ix[axis]];
        x.at(&src)
    })
}

/// Attention carries no positional encoding: permuting the attended axis
/// permutes the output. Relabeling the skeleton relabels GCN output.
#[test]
fn criterion_05_permutation_symmetry() {
    let run = || -> Result<String, String> {
        let acfg = SelfAttentionConfig::new(4, 8, 2, ValueDim::FullOutput, 0.0).unwrap();
        let mut worst = 0.0f64;
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let (t, v) = (r.gen_range(2..=6), r.gen_range(2..=9));
            let x = rand_tensor(&[2, 4, t, v], &mut r);

            let mut ssa = SsaLayer::<f64>::new("s", acfg, &mut r);
            let mut jp: Vec<usize> = (0..v).collect();
            jp.shuffle(&mut r);
            let run_ssa = |l: &mut SsaLayer<f64>, x: &Tensor<f64>| {
                let mut tape = GradTape::new();
                let xv = tape.input(x);
                let y = l.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
                tape.value(y).clone()
            };
            let d = max_abs_diff(
                &run_ssa(&mut ssa, &permute_axis(&x, 3, &jp)),
                &permute_axis(&run_ssa(&mut ssa, &x), 3, &jp),
            );
            worst = worst.max(d);
            if d > 1e-9 {
                return Err(format!("joint permutation moved spatial attention by {d:e}"));
            }

            let mut tsa = TsaLayer::<f64>::new("t", acfg, 1, None, &mut r).unwrap();
            let mut fp: Vec<usize> = (0..t).collect();
            fp.shuffle(&mut r);
            let run_tsa = |l: &mut TsaLayer<f64>, x: &Tensor<f64>| {
                let mut tape = GradTape::new();
                let xv = tape.input(x);
                let y = l.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
                tape.value(y).clone()
            };
            let d = max_abs_diff(
                &run_tsa(&mut tsa, &permute_axis(&x, 2, &fp)),
                &permute_axis(&run_tsa(&mut tsa, &x), 2, &fp),
            );
            worst = worst.max(d);
            if d > 1e-9 {
                return Err(format!("frame permutation moved temporal attention by {d:e}"));
            }
        }

        // Graph convolution: conjugate the adjacency by relabeling joints.
        let edges = vec![(0usize, 1usize), (1, 2), (2, 3), (1, 4), (4, 5)];
        let (v, center) = (6usize, 1usize);
        for (i, strategy) in
            [PartitionStrategy::Uniform, PartitionStrategy::Distance, PartitionStrategy::Spatial]
                .into_iter()
                .enumerate()
        {
            let mut r = rng(200 + i as u64);
            let mut sigma: Vec<usize> = (0..v).collect();
            sigma.shuffle(&mut r);
            let mut inv = vec![0usize; v];
            for (old, &new) in sigma.iter().enumerate() {
                inv[new] = old;
            }
            let topo = SkeletonTopology::new(v, edges.clone(), center).unwrap();
            let relabeled = SkeletonTopology::new(
                v,
                edges.iter().map(|&(a, b)| (sigma[a], sigma[b])).collect(),
                sigma[center],
            )
            .unwrap();
            let adj = AdjacencySet::build(&topo, strategy).map_err(|e| e.to_string())?;
            let adj2 = AdjacencySet::build(&relabeled, strategy).map_err(|e| e.to_string())?;
            let core = GcnCore::<f64>::new("g", &adj, 3, 5, &mut rng(7));
            let core2 = GcnCore::<f64>::new("g", &adj2, 3, 5, &mut rng(7));
            let run_gcn = |core: &GcnCore<f64>, x: &Tensor<f64>| {
                let mut tape = GradTape::new();
                let xv = tape.input(x);
                let y = core.forward(&mut tape, xv).unwrap();
                tape.value(y).clone()
            };
            let x = rand_tensor(&[2, 3, 4, v], &mut r);
            let d = max_abs_diff(
                &run_gcn(&core2, &permute_axis(&x, 3, &inv)),
                &permute_axis(&run_gcn(&core, &x), 3, &inv),
            );
            worst = worst.max(d);
            if d > 1e-9 {
                return Err(format!("{strategy:?} relabeling moved graph convolution by {d:e}"));
            }
        }
        Ok(format!("spatial/temporal attention and graph conv, worst |Δ| {worst:.1e}"))
    };
    report("05 permutation-symmetry", run());
}

/// Both attention streams learn the synthetic 4-class task, and their
/// fusion does better still.
#[test]
fn criterion_06_synthetic_learning() {
    let run = || -> Result<String, String> {
        let start = Instant::now();
        let topo = SkeletonTopology::ntu25();
        let train_ds = generate_synthetic(1, &Archetype::ALL, 50, 25, 32, 0.05)
            .map_err(|e| e.to_string())?;
        let test_ds = generate_synthetic(9999, &Archetype::ALL, 25, 25, 32, 0.05)
            .map_err(|e| e.to_string())?;
        let train_ex =
            prepare_examples::<f32>(&train_ds, &topo, Features::Joints).map_err(|e| e.to_string())?;
        let test_ex =
            prepare_examples::<f32>(&test_ds, &topo, Features::Joints).map_err(|e| e.to_string())?;

        let net = NetworkConfig {
            v: 25,
            t: 32,
            c_in: 3,
            classes: 4,
            channels: vec![16, 32],
            k: 1,
            heads: 2,
            kernel_t: 5,
            drop_rate: 0.0,
            ..NetworkConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            base_lr: 0.05,
            drop_epochs: vec![20, 26],
            drop_rate: 0.0,
            seed: 11,
            ..TrainConfig::default()
        };

        let mut accs = Vec::new();
        let mut fused: Option<Tensor<f64>> = None;
        let mut labels = Vec::new();
        for (i, kind) in [StreamKind::STr, StreamKind::TTr].into_iter().enumerate() {
            let mut model: StreamModel<f32> =
                build_stream(&net, kind, &topo, &mut rng(50 + i as u64))
                    .map_err(|e| e.to_string())?;
            train(&mut model, &train_ex, &tcfg).map_err(|e| e.to_string())?;
            let ev = evaluate(&mut model, &test_ex, 16).map_err(|e| e.to_string())?;
            fused = Some(match &fused {
                None => ev.scores.clone(),
                Some(f) => add_scores(f, &ev.scores).map_err(|e| e.to_string())?,
            });
            labels = ev.labels;
            accs.push((kind.label(), ev.top1));
        }
        let (fused_top1, _) = metrics_from_scores(&fused.unwrap(), &labels, 4);
        for &(label, acc) in &accs {
            if acc < 0.80 {
                return Err(format!("{label} test top-1 {acc:.3} under the 0.80 floor"));
            }
        }
        if fused_top1 < 0.90 {
            return Err(format!("fused test top-1 {fused_top1:.3} under the 0.90 floor"));
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 900.0 {
            return Err(format!("took {elapsed:.1?}, budget is 15min"));
        }
        Ok(format!(
            "{} {:.3} / {} {:.3} / fused {fused_top1:.3}, in {elapsed:.1?}",
            accs[0].0, accs[0].1, accs[1].0, accs[1].1
        ))
    };
    report("06 synthetic-learning", run());
}

/// Fused rows always sum to 2, and shifting either stream's logits by
/// per-row constants never changes the fused prediction.
#[test]
fn criterion_07_fusion_invariants() {
    let run = || -> Result<String, String> {
        let mut r = rng(71);
        let shift_rows = |x: &Tensor<f64>, shifts: &[f64]| {
            Tensor::from_fn(x.shape(), |ix| x.at(ix) + shifts[ix[0]])
        };
        let argmaxes = |f: &Tensor<f64>| -> Vec<usize> {
            let classes = f.shape()[1];
            f.data()
                .chunks(classes)
                .map(|row| (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap())
                .collect()
        };
        for trial in 0..100 {
            let (n, classes) = (r.gen_range(1..=8), r.gen_range(2..=7));
            let a = rand_tensor(&[n, classes], &mut r);
            let b = rand_tensor(&[n, classes], &mut r);
            let fused = fuse_streams(&a, &b).map_err(|e| e.to_string())?;
            for (i, row) in fused.data().chunks(classes).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 2.0).abs() > 1e-6 {
                    return Err(format!("trial {trial} row {i} sums to {s}, expected 2"));
                }
            }
            let sa: Vec<f64> = (0..n).map(|_| r.gen_range(-20.0..20.0)).collect();
            let sb: Vec<f64> = (0..n).map(|_| r.gen_range(-20.0..20.0)).collect();
            let shifted = fuse_streams(&shift_rows(&a, &sa), &shift_rows(&b, &sb))
                .map_err(|e| e.to_string())?;
            if argmaxes(&fused) != argmaxes(&shifted) {
                return Err(format!("trial {trial}: logit shifts changed the fused argmax"));
            }
        }
        Ok("100 trials: rows sum to 2, argmax shift-invariant".into())
    };
    report("07 fusion-invariants", run());
}

fn micro_examples(n: usize, v: usize, t: usize, c: usize, seed: u64) -> Vec<Example<f32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let data = (0..c * t * v).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            Example::single(Tensor::new(vec![c, t, v], data).unwrap(), i % 2)
        })
        .collect()
}

/// The decade schedule lands exactly on 0.1 / 0.01 / 0.001 at epochs
/// 0 / 60 / 90, and adaptive-graph streams ramp linearly through epoch one.
#[test]
fn criterion_08_learning_rate_schedule() {
    let run = || -> Result<String, String> {
        let topo = SkeletonTopology::new(3, vec![(0, 1), (1, 2)], 1).unwrap();
        let net = NetworkConfig {
            v: 3,
            t: 4,
            c_in: 2,
            classes: 2,
            channels: vec![4],
            k: 0,
            heads: 1,
            kernel_t: 3,
            drop_rate: 0.0,
            ..NetworkConfig::default()
        };
        let data = micro_examples(8, 3, 4, 2, 81);

        let mut model: StreamModel<f32> =
            build_stream(&net, StreamKind::STr, &topo, &mut rng(1)).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: 91,
            batch_size: 2,
            base_lr: 0.1,
            drop_epochs: vec![60, 90],
            drop_rate: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg).map_err(|e| e.to_string())?;
        for (epoch, want) in [(0usize, 0.1f64), (59, 0.1), (60, 0.01), (89, 0.01), (90, 0.001)] {
            let got = h.epochs[epoch].lr;
            if got != want {
                return Err(format!("epoch {epoch} lr {got} != {want}"));
            }
        }

        let mut agcn: StreamModel<f32> =
            build_stream(&net, StreamKind::Agcn1s, &topo, &mut rng(2))
                .map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            base_lr: 0.1,
            drop_epochs: vec![],
            drop_rate: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let h = train(&mut agcn, &data, &cfg).map_err(|e| e.to_string())?;
        // 4 steps per epoch: the warmup epoch climbs 0, 0.025, 0.05, 0.075.
        for (step, want) in [0.0, 0.025, 0.05, 0.075].into_iter().enumerate() {
            if (h.step_lrs[step] - want).abs() > 1e-12 {
                return Err(format!("warmup step {step} lr {} != {want}", h.step_lrs[step]));
            }
        }
        if h.step_lrs[4..8].iter().any(|&lr| lr != 0.1) {
            return Err(format!("post-warmup steps should run at 0.1: {:?}", &h.step_lrs[4..8]));
        }
        Ok("decade drops exact at epochs 0/60/90; warmup ramps 0->0.1 over epoch one".into())
    };
    report("08 lr-schedule", run());
}

/// Attention export on the full joint set: stochastic per-head rows, a
/// 25x25 head-averaged map, and CSV/PGM round-trips within quantization.
#[test]
fn criterion_09_attention_export() {
    let run = || -> Result<String, String> {
        let topo = SkeletonTopology::ntu25();
        let net = NetworkConfig {
            v: 25,
            t: 16,
            c_in: 3,
            classes: 4,
            channels: vec![8, 8],
            k: 1,
            heads: 2,
            kernel_t: 3,
            drop_rate: 0.0,
            capture: true,
            ..NetworkConfig::default()
        };
        let mut model: StreamModel<f32> =
            build_stream(&net, StreamKind::STr, &topo, &mut rng(90)).map_err(|e| e.to_string())?;
        let mut r = rng(91);
        let x = Tensor::new(
            vec![3, 16, 25],
            (0..3 * 16 * 25).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let maps = extract_attention_maps(&mut model, &x).map_err(|e| e.to_string())?;

        let joint: Vec<&AttentionRecord<f32>> =
            maps.records.iter().filter(|r| r.axis == AttentionAxis::Joints).collect();
        if joint.is_empty() {
            return Err("no joint-attention record captured".into());
        }
        for rec in &joint {
            if rec.map.shape() != [1, 16, 2, 25, 25] {
                return Err(format!("unexpected raw map shape {:?}", rec.map.shape()));
            }
            for (i, row) in rec.map.data().chunks(25).enumerate() {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(format!("{} per-head row {i} sums to {s}", rec.layer));
                }
            }
        }
        let last = maps.summaries.iter().rev().find(|s| s.axis == AttentionAxis::Joints).unwrap();
        if last.averaged.shape() != [25, 25] {
            return Err(format!("head-averaged map is {:?}, want 25x25", last.averaged.shape()));
        }

        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let csv_path = dir.path().join("map.csv");
        write_matrix_csv(&csv_path, &last.averaged).map_err(|e| e.to_string())?;
        let back = read_matrix_csv(&csv_path).map_err(|e| e.to_string())?;
        if back.shape() != [25, 25] {
            return Err(format!("csv round-trip shape {:?}", back.shape()));
        }
        let csv_err = back
            .data()
            .iter()
            .zip(last.averaged.data())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max);
        if csv_err > 1e-6 {
            return Err(format!("csv round-trip off by {csv_err:e}"));
        }

        let pgm_path = dir.path().join("map.pgm");
        write_pgm(&pgm_path, &last.averaged).map_err(|e| e.to_string())?;
        let (rows, cols, pixels) = read_pgm(&pgm_path).map_err(|e| e.to_string())?;
        if (rows, cols) != (25, 25) {
            return Err(format!("pgm round-trip is {rows}x{cols}"));
        }
        let max = last.averaged.data().iter().cloned().fold(0.0f32, f32::max);
        let mut worst = 0.0f64;
        for (&px, &v) in pixels.iter().zip(last.averaged.data()) {
            let want = (v / max * 255.0) as f64;
            worst = worst.max((px as f64 - want).abs());
        }
        if worst > 0.5 + 1e-6 {
            return Err(format!("pgm quantization error {worst}"));
        }
        if pixels.iter().max() != Some(&255) {
            return Err("brightest pixel should be 255".into());
        }

        let rel = maps.joint_relevance.ok_or("missing joint relevance")?;
        if rel.len() != 25 {
            return Err(format!("relevance has {} entries", rel.len()));
        }
        Ok(format!(
            "25x25 map, stochastic per-head rows, csv |Δ| {csv_err:.1e}, pgm |Δ| {worst:.2}px"
        ))
    };
    report("09 attention-export", run());
}

/// Windowed temporal attention: 300 frames at window 10 give 30 blocks,
/// cross-block weight is exactly zero, and a T-sized window is plain
/// attention.
#[test]
fn criterion_10_windowed_attention() {
    let run = || -> Result<String, String> {
        let windows = tsa_block_partition(300, 10).map_err(|e| e.to_string())?;
        if windows.len() != 30 || !windows.iter().all(|w| w.len() == 10) {
            return Err(format!("300/10 gave {} windows", windows.len()));
        }

        let cfg = SelfAttentionConfig::new(4, 8, 2, ValueDim::FullOutput, 0.0).unwrap();
        let core = AttnCore::<f64>::new("a", cfg, &mut rng(101));
        let x = rand_tensor(&[1, 4, 300, 2], &mut rng(102));

        let mut sink: Vec<AttentionRecord<f64>> = Vec::new();
        let mut ctx = LayerCtx::capturing(&mut sink);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        core.forward(&mut tape, xv, AttentionAxis::Frames, Some(&windows), &mut ctx)
            .map_err(|e| e.to_string())?;
        let map = &sink[0].map;
        let mut nonzero_cross = 0usize;
        for (cell, &p) in map.data().iter().enumerate() {
            let (row, col) = ((cell / 300) % 300, cell % 300);
            if row / 10 != col / 10 && p != 0.0 {
                nonzero_cross += 1;
            }
        }
        if nonzero_cross > 0 {
            return Err(format!("{nonzero_cross} cross-block scores are nonzero"));
        }

        let full = tsa_block_partition(300, 300).map_err(|e| e.to_string())?;
        let windowed = run_attention(&core, &x, AttentionAxis::Frames, Some(&full));
        let plain = run_attention(&core, &x, AttentionAxis::Frames, None);
        let d = max_abs_diff(&windowed, &plain);
        if d > 1e-9 {
            return Err(format!("window of T differs from plain attention by {d:e}"));
        }
        Ok(format!("30 windows, zero cross-block weight, full window |Δ| {d:.1e}"))
    };
    report("10 windowed-attention", run());
}
