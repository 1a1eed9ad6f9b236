//! Command implementations. Every fallible path funnels into [`Failure`],
//! which carries the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sttr::data::{
    compute_bones, concat_bones, generate_synthetic, person_view, prepare_examples, preprocess,
    read_dataset, read_manifest, read_sample, write_dataset, Archetype, Features,
};
use sttr::error::{ConfigError, DataError};
use sttr::export::{write_matrix_csv, write_pgm};
use sttr::graph::SkeletonTopology;
use sttr::layers::{AttnCore, SelfAttentionConfig, TcnCore};
use sttr::net::{
    add_scores, build_stream, count_parameters, evaluate, extract_attention_maps, load_checkpoint,
    metrics_from_scores, save_checkpoint, Example, History, NetworkConfig, StreamKind,
    StreamModel, TrainConfig,
};
use sttr::tensor::Tensor;
use sttr::verify::{run_checks, CheckModule, GRAD_TOL};
use sttr::Error;

use crate::ModuleArg;

/// What to print and the exit code to return.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            // A checkpoint that doesn't match the model is a bad artifact,
            // not a bad invocation; same for corrupt or mismatched samples.
            Error::Checkpoint(_) => 3,
            Error::Data(d) => match d {
                DataError::Io(_) | DataError::Manifest(_) | DataError::UnknownArchetype(_) => 2,
                _ => 3,
            },
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Error::from(e).into()
    }
}

impl From<sttr::error::CheckpointError> for Failure {
    fn from(e: sttr::error::CheckpointError) -> Self {
        Error::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Error::from(e).into()
    }
}

fn io_failure<'p>(path: &'p Path) -> impl Fn(std::io::Error) -> Failure + 'p {
    move |e| Failure::config(format!("{}: {e}", path.display()))
}

/// One training/evaluation run: where the data lives, which streams to
/// build, and the network and optimizer settings. JSON; every field has a
/// default, unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (or manifest path) used for training.
    pub data: Option<PathBuf>,
    /// Held-out dataset: evaluated after training and by `eval`. Falls back
    /// to `data`.
    pub eval_data: Option<PathBuf>,
    /// Streams trained independently and fused at evaluation.
    pub streams: Vec<StreamKind>,
    pub features: Features,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            eval_data: None,
            streams: vec![StreamKind::STr, StreamKind::TTr],
            features: Features::Joints,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.streams.is_empty() {
            return Err(ConfigError("run config needs at least one stream".into()));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if self.streams[..i].contains(s) {
                return Err(ConfigError(format!("stream {} is listed twice", s.label())));
            }
        }
        if self.features.channels() != self.network.c_in {
            return Err(ConfigError(format!(
                "{:?} features produce {} channels but the network expects c_in = {}",
                self.features,
                self.features.channels(),
                self.network.c_in
            )));
        }
        Ok(())
    }

    fn training_data(&self) -> Result<&Path, Failure> {
        self.data
            .as_deref()
            .ok_or_else(|| Failure::config("run config needs a \"data\" path for this command"))
    }

    fn eval_source(&self) -> Result<&Path, Failure> {
        self.eval_data.as_deref().map(Ok).unwrap_or_else(|| self.training_data())
    }

    /// Per-stream weight-init seed, spaced away from the shuffle rng that
    /// `train` derives from the seed directly.
    fn init_rng(&self, stream_idx: usize) -> ChaCha8Rng {
        let s = self
            .train
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream_idx as u64 + 1);
        ChaCha8Rng::seed_from_u64(s)
    }
}

fn load_run(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(io_failure(path))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_base(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_owned()
    } else {
        path.parent().map(Path::to_owned).unwrap_or_default()
    }
}

/// Loads a dataset, checks it against the network shape, and maps it to
/// per-person training examples with the configured features.
fn load_examples(
    cfg: &RunConfig,
    src: &Path,
) -> Result<(Vec<Example<f32>>, SkeletonTopology), Failure> {
    let ds = read_dataset(src)?;
    let topo = ds.manifest.resolve_topology(&manifest_base(src))?;
    let m = &ds.manifest;
    if m.v != cfg.network.v {
        return Err(Failure::config(format!(
            "dataset has {} joints but the network expects {}",
            m.v, cfg.network.v
        )));
    }
    if m.t_target != cfg.network.t {
        return Err(Failure::config(format!(
            "dataset targets {} frames but the network expects {}",
            m.t_target, cfg.network.t
        )));
    }
    if m.classes.len() != cfg.network.classes {
        return Err(Failure::config(format!(
            "dataset has {} classes but the network expects {}",
            m.classes.len(),
            cfg.network.classes
        )));
    }
    let examples = prepare_examples::<f32>(&ds, &topo, cfg.features)?;
    Ok((examples, topo))
}

/// Built-in topology for a joint count; falls back to a chain so parameter
/// counting (which never looks at the wiring) works for any V.
fn topology_for(v: usize) -> Result<SkeletonTopology, Failure> {
    match v {
        25 => Ok(SkeletonTopology::ntu25()),
        18 => Ok(SkeletonTopology::kinetics18()),
        _ => SkeletonTopology::new(v, (1..v).map(|i| (i - 1, i)).collect(), v / 2)
            .map_err(|e| Failure::config(e.to_string())),
    }
}

pub fn gen_data(
    out: &Path,
    seed: u64,
    classes: &[String],
    n: usize,
    joints: usize,
    frames: usize,
    noise: f64,
) -> Result<(), Failure> {
    let archetypes: Vec<Archetype> =
        classes.iter().map(|c| Archetype::parse(c)).collect::<Result<_, _>>()?;
    let ds = generate_synthetic(seed, &archetypes, n, joints, frames, noise)?;
    write_dataset(out, &ds)?;
    println!(
        "wrote {} samples ({} classes x {}) to {}",
        ds.samples.len(),
        archetypes.len(),
        n,
        out.display()
    );
    Ok(())
}

fn write_history(path: &Path, h: &History) -> Result<(), Failure> {
    let mut text = String::from("epoch,lr,loss,top1\n");
    for e in &h.epochs {
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, e.top1));
    }
    fs::write(path, text).map_err(io_failure(path))
}

/// Per-stream accuracy plus the fused score when more than one stream ran.
fn report_eval(
    models: &mut [(&'static str, StreamModel<f32>)],
    data: &[Example<f32>],
    batch: usize,
) -> Result<(), Failure> {
    let mut fused: Option<Tensor<f64>> = None;
    let mut labels: Vec<usize> = Vec::new();
    let mut k = 1;
    for (label, model) in models.iter_mut() {
        let ev = evaluate(model, data, batch)?;
        println!("{:<10} top1 {:.4}  top{} {:.4}", label, ev.top1, ev.k, ev.topk);
        fused = Some(match &fused {
            None => ev.scores.clone(),
            Some(sum) => add_scores(sum, &ev.scores).map_err(Error::from)?,
        });
        labels = ev.labels;
        k = ev.k;
    }
    if models.len() > 1 {
        let fused = fused.expect("at least one stream evaluated");
        let (top1, topk) = metrics_from_scores(&fused, &labels, k);
        println!("{:<10} top1 {:.4}  top{} {:.4}", "fused", top1, k, topk);
    }
    Ok(())
}

pub fn train(config: &Path, out_dir: &Path) -> Result<(), Failure> {
    let cfg = load_run(config)?;
    let (examples, topo) = load_examples(&cfg, cfg.training_data()?)?;
    let held_out = match &cfg.eval_data {
        Some(p) => Some(load_examples(&cfg, p)?.0),
        None => None,
    };
    fs::create_dir_all(out_dir).map_err(io_failure(out_dir))?;

    let mut trained: Vec<(&'static str, StreamModel<f32>)> = Vec::new();
    for (i, &kind) in cfg.streams.iter().enumerate() {
        let label = kind.label();
        let mut model: StreamModel<f32> =
            build_stream(&cfg.network, kind, &topo, &mut cfg.init_rng(i))?;
        println!(
            "[{label}] {} parameters, {} examples, {} epochs",
            count_parameters(&model).total,
            examples.len(),
            cfg.train.epochs
        );
        let history = sttr::net::train(&mut model, &examples, &cfg.train)?;
        let last = history.epochs.last().expect("at least one epoch");
        println!("[{label}] final loss {:.4}  train top1 {:.3}", last.loss, last.top1);

        let ckpt = out_dir.join(format!("{label}.ckpt"));
        save_checkpoint(&model, &ckpt)?;
        let hist = out_dir.join(format!("{label}-history.csv"));
        write_history(&hist, &history)?;
        println!("[{label}] wrote {} and {}", ckpt.display(), hist.display());
        trained.push((label, model));
    }

    if let Some(held_out) = held_out {
        report_eval(&mut trained, &held_out, cfg.train.batch_size)?;
    }
    Ok(())
}

pub fn eval(config: &Path, checkpoint_dir: &Path) -> Result<(), Failure> {
    let cfg = load_run(config)?;
    let (examples, topo) = load_examples(&cfg, cfg.eval_source()?)?;

    let mut models: Vec<(&'static str, StreamModel<f32>)> = Vec::new();
    for (i, &kind) in cfg.streams.iter().enumerate() {
        let label = kind.label();
        let mut model: StreamModel<f32> =
            build_stream(&cfg.network, kind, &topo, &mut cfg.init_rng(i))?;
        load_checkpoint(&mut model, &checkpoint_dir.join(format!("{label}.ckpt")))?;
        models.push((label, model));
    }
    report_eval(&mut models, &examples, cfg.train.batch_size)
}

pub fn params(config: Option<&Path>, sweep_csv: Option<&Path>) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => load_run(p)?,
        None => RunConfig::default(),
    };
    let net = &cfg.network;
    let topo = topology_for(net.v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let kind = cfg.streams[0];
    let model: StreamModel<f32> = build_stream(net, kind, &topo, &mut rng)?;
    let report = count_parameters(&model);
    println!("{} (V={}, T={}, classes={})", kind.label(), net.v, net.t, net.classes);
    for (group, n) in &report.groups {
        println!("  {group:<8} {n:>9}");
    }
    println!("  {:<8} {:>9}  ({:.2}M)", "total", report.total, report.total as f64 / 1e6);

    println!("\narchitecture comparison at this config:");
    let table = [
        StreamKind::StGcn,
        StreamKind::Agcn1s,
        StreamKind::STr,
        StreamKind::TTr,
        StreamKind::StTr1s,
    ];
    for kind in table {
        let m: StreamModel<f32> = build_stream(net, kind, &topo, &mut rng)?;
        let total = count_parameters(&m).total;
        println!("  {:<10} {:>9}  ({:.2}M)", kind.label(), total, total as f64 / 1e6);
    }

    if let Some(path) = sweep_csv {
        write_sweep(path, net)?;
        println!("\nwrote channel sweep to {}", path.display());
    }
    Ok(())
}

/// Conv-vs-attention core sizes over a channel sweep: one temporal conv
/// versus one attention block at the same width, no BN/residual around
/// either.
fn write_sweep(path: &Path, net: &NetworkConfig) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut text = String::from("channels,tcn_core,tsa_core,delta\n");
    for c in [64usize, 128, 256, 512] {
        let tcn: TcnCore<f32> = TcnCore::new("tcn", c, c, net.kernel_t, 1, &mut rng)?;
        let acfg = SelfAttentionConfig::new(c, c, net.heads, net.value_dim, 0.0)?;
        let tsa: AttnCore<f32> = AttnCore::new("tsa", acfg, &mut rng);
        let (tcn, tsa) = (count_parameters(&tcn).total, count_parameters(&tsa).total);
        text.push_str(&format!("{c},{tcn},{tsa},{}\n", tcn as i64 - tsa as i64));
    }
    fs::write(path, text).map_err(io_failure(path))
}

pub fn export_attention(
    config: &Path,
    checkpoint: &Path,
    sample: &Path,
    out_dir: &Path,
) -> Result<(), Failure> {
    let cfg = load_run(config)?;
    let topo = match &cfg.data {
        Some(p) => read_manifest(p)?.resolve_topology(&manifest_base(p))?,
        None => topology_for(cfg.network.v)?,
    };
    let kind = cfg.streams[0];
    let mut model: StreamModel<f32> = build_stream(&cfg.network, kind, &topo, &mut cfg.init_rng(0))?;
    load_checkpoint(&mut model, checkpoint)?;

    let s = read_sample(sample)?;
    let coords = preprocess(&s.coords, cfg.network.t, &topo)?;
    let x = match cfg.features {
        Features::Joints => person_view(&coords, 0),
        Features::Bones => person_view(&compute_bones(&coords, &topo)?, 0),
        Features::JointsBones => {
            let bones = compute_bones(&coords, &topo)?;
            person_view(&concat_bones(&coords, &bones)?, 0)
        }
    };
    let maps = extract_attention_maps(&mut model, &x)?;
    if maps.summaries.is_empty() {
        return Err(Failure::config(format!(
            "stream {} has no attention layers to export",
            kind.label()
        )));
    }

    fs::create_dir_all(out_dir).map_err(io_failure(out_dir))?;
    for summary in &maps.summaries {
        write_matrix_csv(&out_dir.join(format!("{}.csv", summary.layer)), &summary.averaged)?;
        write_pgm(&out_dir.join(format!("{}.pgm", summary.layer)), &summary.averaged)?;
    }
    if let Some(rel) = &maps.joint_relevance {
        let mut text = String::from("joint,score\n");
        for (joint, score) in rel.iter().enumerate() {
            text.push_str(&format!("{joint},{score}\n"));
        }
        let path = out_dir.join("relevance.csv");
        fs::write(&path, text).map_err(io_failure(&path))?;
    }
    println!(
        "wrote {} attention maps ({} with joint relevance) to {}",
        maps.summaries.len(),
        if maps.joint_relevance.is_some() { "one" } else { "none" },
        out_dir.display()
    );
    Ok(())
}

pub fn gradcheck(module: ModuleArg, inject_fault: Option<&str>) -> Result<(), Failure> {
    let filter = match module {
        ModuleArg::All => None,
        ModuleArg::Tensor => Some(CheckModule::Tensor),
        ModuleArg::Layers => Some(CheckModule::Layers),
        ModuleArg::Network => Some(CheckModule::Network),
    };
    let outcomes = run_checks(filter, inject_fault);
    let mut failed: Vec<&str> = Vec::new();
    let mut checked = 0usize;
    for o in &outcomes {
        match &o.result {
            Ok(r) => {
                checked += r.checked;
                println!(
                    "{:<7} {:<24} max rel err {:.3e} at {:<12} {}",
                    o.module.label(),
                    o.name,
                    r.max_rel_err,
                    r.worst,
                    if o.passed() { "ok" } else { "FAIL" }
                );
            }
            Err(e) => println!("{:<7} {:<24} error: {e}", o.module.label(), o.name),
        }
        if !o.passed() {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        println!("{} checks passed ({checked} gradients, tolerance {GRAD_TOL:e})", outcomes.len());
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("gradient check failed: {}", failed.join(", ")) })
    }
}
