//! End-to-end tests of the `sttr` binary: exit codes, emitted files, and
//! output formats for every subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sttr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sttr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Small dataset (`n` samples per class) and a two-stream run config sized
/// to finish in well under a second.
fn sized_workspace(
    n: usize,
    drop_epochs: &[usize],
    base_lr: f64,
    epochs: usize,
) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let out = sttr(
        &["gen-data", "--out", "data", "--seed", "1", "--n", &n.to_string(), "--frames", "16"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = serde_json::json!({
        "data": "data",
        "streams": ["s-tr", "t-tr"],
        "network": {
            "v": 25, "t": 16, "c_in": 3, "classes": 4,
            "channels": [8, 8], "k": 1, "heads": 2, "kernel_t": 3, "drop_rate": 0.0
        },
        "train": {
            "epochs": epochs, "batch_size": 8, "base_lr": base_lr,
            "drop_epochs": drop_epochs, "drop_rate": 0.0, "seed": 7
        }
    });
    let path = dir.path().join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (dir, path)
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let r = sttr(
            &["gen-data", "--out", out, "--seed", "5", "--n", "2", "--frames", "12"],
            dir.path(),
        );
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let r = sttr(
        &["gen-data", "--out", "c", "--seed", "6", "--n", "2", "--frames", "12"],
        dir.path(),
    );
    assert_eq!(code(&r), 0);

    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "manifest.json"), read("b", "manifest.json"));
    assert_eq!(read("a", "s00000.skel"), read("b", "s00000.skel"));
    assert_ne!(read("a", "s00000.skel"), read("c", "s00000.skel"));
}

#[test]
fn gen_data_defaults_cover_four_classes() {
    let dir = TempDir::new().unwrap();
    let out = sttr(&["gen-data", "--out", "d", "--n", "2"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["V"], 25);
}

#[test]
fn unknown_archetype_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = sttr(&["gen-data", "--out", "d", "--classes", "moonwalk"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("moonwalk"), "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoints_and_history() {
    let (dir, cfg) = sized_workspace(3, &[1], 0.02, 2);
    let out = sttr(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    for stream in ["s-tr", "t-tr"] {
        let ckpt = dir.path().join("run").join(format!("{stream}.ckpt"));
        assert!(ckpt.exists(), "missing {}", ckpt.display());
        let hist =
            fs::read_to_string(dir.path().join("run").join(format!("{stream}-history.csv")))
                .unwrap();
        let lines: Vec<&str> = hist.lines().collect();
        assert_eq!(lines[0], "epoch,lr,loss,top1");
        assert_eq!(lines.len(), 1 + 2, "one row per epoch:\n{hist}");
        // Second epoch sits past the drop epoch: a tenth of the base rate.
        assert!(lines[1].starts_with("0,0.02,"), "{hist}");
        assert!(lines[2].starts_with("1,0.002,"), "{hist}");
    }
}

#[test]
fn eval_reproduces_training_report_from_checkpoints() {
    let (dir, cfg) = sized_workspace(3, &[], 0.02, 2);
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = sttr(&["eval", "--config", &cfg, "--checkpoint-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for label in ["s-tr", "t-tr", "fused"] {
        assert!(text.contains(label), "missing {label} in:\n{text}");
    }
    // Same config, same checkpoints: a second eval is bit-identical.
    let again = sttr(&["eval", "--config", &cfg, "--checkpoint-dir", "run"], dir.path());
    assert_eq!(stdout(&again), text);
}

#[test]
fn untrained_checkpoints_score_at_chance() {
    // A zero learning rate keeps the random init; four classes and 100
    // samples, so top-1 should land near 0.25.
    let (dir, cfg) = sized_workspace(25, &[], 0.0, 1);
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = sttr(&["eval", "--config", &cfg, "--checkpoint-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for line in stdout(&out).lines() {
        let top1: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!((top1 - 0.25).abs() <= 0.15, "expected chance-level accuracy: {line}");
    }
}

#[test]
fn corrupt_checkpoint_is_an_artifact_error() {
    let (dir, cfg) = sized_workspace(3, &[], 0.02, 1);
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let ckpt = dir.path().join("run/s-tr.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xFF;
    fs::write(&ckpt, bytes).unwrap();
    let out = sttr(&["eval", "--config", &cfg, "--checkpoint-dir", "run"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn checkpoint_for_a_different_architecture_is_rejected() {
    let (dir, cfg) = sized_workspace(3, &[], 0.02, 1);
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Same files evaluated under a wider network: shape mismatch, exit 3.
    let mut wider: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    wider["network"]["channels"] = serde_json::json!([8, 16]);
    fs::write(dir.path().join("wider.json"), wider.to_string()).unwrap();
    let out = sttr(&["eval", "--config", "wider.json", "--checkpoint-dir", "run"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"learning_rate": 0.1}"#).unwrap();
    let out = sttr(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    fs::write(dir.path().join("bad2.json"), r#"{"streams": []}"#).unwrap();
    let out = sttr(&["eval", "--config", "bad2.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = sttr(&["train", "--config", "nope.json"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn params_output_is_deterministic_and_lists_architectures() {
    let dir = TempDir::new().unwrap();
    let a = sttr(&["params", "--sweep-csv", "sweep.csv"], dir.path());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let text = stdout(&a);
    for label in ["st-gcn", "agcn-1s", "s-tr", "t-tr", "st-tr-1s", "total", "fc"] {
        assert!(text.contains(label), "missing {label} in:\n{text}");
    }
    let b = sttr(&["params", "--sweep-csv", "sweep.csv"], dir.path());
    assert_eq!(stdout(&b), text);

    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("channels,tcn_core,tsa_core,delta"));
    let deltas: Vec<i64> =
        lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(deltas.len(), 4);
    assert!(deltas.windows(2).all(|w| w[0] < w[1]), "deltas should grow: {deltas:?}");
}

#[test]
fn export_attention_needs_capture_enabled() {
    let (dir, cfg) = sized_workspace(3, &[], 0.02, 1);
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = sttr(
        &[
            "export-attention", "--config", &cfg, "--checkpoint", "run/s-tr.ckpt",
            "--sample", "data/s00000.skel", "--out-dir", "maps",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("capture"), "{}", stderr(&out));
}

#[test]
fn export_attention_writes_csv_pgm_and_relevance() {
    let (dir, cfg_path) = sized_workspace(3, &[], 0.02, 1);
    let cfg_str = cfg_path.to_str().unwrap().to_owned();
    let out = sttr(&["train", "--config", &cfg_str, "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut with_capture: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    with_capture["network"]["capture"] = serde_json::json!(true);
    fs::write(dir.path().join("cap.json"), with_capture.to_string()).unwrap();

    let out = sttr(
        &[
            "export-attention", "--config", "cap.json", "--checkpoint", "run/s-tr.ckpt",
            "--sample", "data/s00000.skel", "--out-dir", "maps",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let maps = dir.path().join("maps");
    let csv = fs::read_to_string(maps.join("l2.s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 25);

    let pgm = fs::read(maps.join("l2.s.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n25 25\n255\n"), "unexpected header");
    assert_eq!(pgm.len(), "P5\n25 25\n255\n".len() + 25 * 25);
    assert!(pgm[14..].contains(&255u8), "max pixel should hit 255");

    let rel = fs::read_to_string(maps.join("relevance.csv")).unwrap();
    assert_eq!(rel.lines().next(), Some("joint,score"));
    assert_eq!(rel.lines().count(), 26);
}

#[test]
fn gradcheck_passes_and_injected_faults_are_named() {
    let dir = TempDir::new().unwrap();
    let out = sttr(&["gradcheck", "--module", "tensor"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("matmul"));

    let out = sttr(
        &["gradcheck", "--module", "tensor", "--inject-fault", "matmul"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("matmul"), "{}", stderr(&out));
}
