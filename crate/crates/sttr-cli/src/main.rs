//! `sttr`: train, evaluate, and inspect skeleton action-recognition streams.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config/user error,
//! 3 artifact mismatch.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "sttr", version, about = "Skeleton action recognition with graph convolutions and self-attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled skeleton dataset.
    GenData {
        /// Output directory for sample files and manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Motion archetypes, one class each.
        #[arg(long, value_delimiter = ',', default_values_t = [
            "raise-one-arm".to_string(),
            "raise-both-arms-symmetric".to_string(),
            "wave-periodic".to_string(),
            "crouch-global-translation".to_string(),
        ])]
        classes: Vec<String>,
        /// Samples per class.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Joints per skeleton.
        #[arg(long, default_value_t = 25)]
        joints: usize,
        /// Frames per sequence.
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Gaussian coordinate noise.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train every configured stream; writes a checkpoint and a per-epoch
    /// history CSV per stream.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Evaluate trained checkpoints; prints per-stream and fused accuracy.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding one <stream>.ckpt per configured stream.
        #[arg(long, default_value = ".")]
        checkpoint_dir: PathBuf,
    },
    /// Parameter counts: per-layer breakdown, cross-architecture table, and
    /// an optional channel-sweep CSV of conv-vs-attention core sizes.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write "channels,tcn_core,tsa_core,delta" rows for C in 64..512.
        #[arg(long)]
        sweep_csv: Option<PathBuf>,
    },
    /// Export attention maps of a trained model on one sample as CSV + PGM,
    /// plus a per-joint relevance CSV.
    ExportAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .skel sample file.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        /// Test fixture: flip the named check's analytic pass to prove the
        /// harness catches a broken backward rule.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Tensor,
    Layers,
    Network,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { out, seed, classes, n, joints, frames, noise } => {
            run::gen_data(&out, seed, &classes, n, joints, frames, noise)
        }
        Cmd::Train { config, out_dir } => run::train(&config, &out_dir),
        Cmd::Eval { config, checkpoint_dir } => run::eval(&config, &checkpoint_dir),
        Cmd::Params { config, sweep_csv } => run::params(config.as_deref(), sweep_csv.as_deref()),
        Cmd::ExportAttention { config, checkpoint, sample, out_dir } => {
            run::export_attention(&config, &checkpoint, &sample, &out_dir)
        }
        Cmd::Gradcheck { module, inject_fault } => {
            run::gradcheck(module, inject_fault.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
