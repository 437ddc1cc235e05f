use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtp::data::embedding::save_embedding;
use mtp::data::DatasetManifest;
use mtp::FeatureMatrix;

fn mtp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MTP_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic data under `data/` and a small run config at `run.toml`.
    fn new(task: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("spec.toml"),
            format!("n_targets = 2\nsamples_per_target = 12\nnoise_sigma = 0.1\nseed = 4\ntask = \"{task}\"\n"),
        )
        .unwrap();
        let o = mtp(&["synth-data", "--spec", "spec.toml", "--out", "data"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        fs::write(
            dir.path().join("run.toml"),
            format!(
                "[model]\nd_model = 8\nn_layers = 2\nffn_hidden = 8\ntask = \"{task}\"\n\
                 [train]\nepochs = 3\nlr = 0.003\nbatch_size = 4\n\
                 [paths]\nmanifest = \"data/manifest.json\"\n"
            ),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        mtp(args, self.path())
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--config", "run.toml", "--output-dir", out, "--quiet"];
        args.extend_from_slice(extra);
        let o = self.run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        o
    }
}

#[test]
fn synth_data_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), "n_targets = 2\nsamples_per_target = 32\nseed = 1\n").unwrap();
    for out in ["a", "b"] {
        let o = mtp(&["synth-data", "--spec", "spec.toml", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.samples.len(), 64);
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn synth_data_rejects_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), "n_targets = 2\nsamples_per_targt = 32\n").unwrap();
    let o = mtp(&["synth-data", "--spec", "spec.toml", "--out", "d"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("samples_per_targt"), "{}", stderr(&o));
}

#[test]
fn train_writes_fixed_layout() {
    let ws = Workspace::new("regression");
    ws.train("out", &[]);
    let out = ws.path().join("out");
    for f in ["config.resolved", "checkpoint.bin", "metrics.log"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("metrics.log")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["epoch"], 3);
    assert!(lines[0]["eval"]["rmse"].is_number());
}

#[test]
fn override_reaches_resolved_config() {
    let ws = Workspace::new("regression");
    ws.train("out", &["--enable-mps=false", "--epochs", "2"]);
    let resolved: toml::Table = fs::read_to_string(ws.path().join("out/config.resolved"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(resolved["model"]["enable_mps"].as_bool(), Some(false));
    assert_eq!(resolved["model"]["enable_mts"].as_bool(), Some(true));
    assert_eq!(resolved["train"]["epochs"].as_integer(), Some(2));
}

#[test]
fn missing_manifest_names_path() {
    let ws = Workspace::new("regression");
    let o = ws.run(&["train", "--config", "run.toml", "--manifest", "nowhere/manifest.json", "--output-dir", "o"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("nowhere/manifest.json"), "{}", stderr(&o));
}

#[test]
fn training_is_byte_reproducible() {
    let ws = Workspace::new("regression");
    ws.train("out", &[]);
    let first = tree(&ws.path().join("out"));
    ws.train("out", &[]);
    assert_eq!(first, tree(&ws.path().join("out")));
}

#[test]
fn eval_reports_and_checks_compatibility() {
    let ws = Workspace::new("regression");
    ws.train("out", &[]);
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            "out/checkpoint.bin",
            "--manifest",
            "data/manifest.json",
            "--output-dir",
            "out",
        ];
        args.extend_from_slice(extra);
        ws.run(&args)
    };
    let a = eval(&[]);
    let b = eval(&[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let report: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["n"], 6);
    assert_eq!(fs::read_to_string(ws.path().join("out/eval.test.json")).unwrap(), stdout(&a));

    let t = eval(&["--split", "train"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&t)).unwrap();
    assert_eq!(report["split"], "train");
    assert_eq!(report["n"], 18);

    assert!(eval(&["--config", "run.toml"]).status.success());
    let bad = eval(&["--config", "run.toml", "--enable-ffn=false"]);
    assert_eq!(bad.status.code(), Some(1));
    let msg = stderr(&bad);
    assert!(msg.contains("config hash mismatch"), "{msg}");
    let hashes = msg.split_whitespace().filter(|w| w.len() == 64 && w.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(hashes.count(), 2, "{msg}");
}

#[test]
fn eval_refuses_task_mismatch() {
    let reg = Workspace::new("regression");
    reg.train("out", &[]);
    let cls = Workspace::new("classification");
    let ckpt = reg.path().join("out/checkpoint.bin");
    let o = cls.run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        "data/manifest.json",
        "--output-dir",
        "out",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("task mismatch"), "{}", stderr(&o));
}

#[test]
fn classification_eval_reports_auc() {
    let ws = Workspace::new("classification");
    ws.train("out", &[]);
    let o = ws.run(&["eval", "--checkpoint", "out/checkpoint.bin", "--manifest", "data/manifest.json", "--split", "train", "--output-dir", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn gradcheck_pass_fail_and_guard() {
    let dir = tempfile::tempdir().unwrap();
    let a = mtp(&["gradcheck", "--seed", "3"], dir.path());
    assert!(a.status.success(), "{}", stdout(&a));
    assert!(stdout(&a).contains("PASS"));
    let b = mtp(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(stdout(&a), stdout(&b));

    let bad = mtp(&["gradcheck", "--seed", "3", "--corrupt-block", "layers.0.attn.wv"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let out = stdout(&bad);
    let failed: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{out}");
    assert!(failed[0].starts_with("layers.0.attn.wv"));

    let big = mtp(&["gradcheck", "--m", "30", "--n", "30", "--d-model", "16"], dir.path());
    assert_eq!(big.status.code(), Some(1));
    assert!(stderr(&big).contains("guard"), "{}", stderr(&big));
}

#[test]
fn export_attention_scores() {
    let ws = Workspace::new("regression");
    ws.train("out", &[]);
    // Identical atom rows make every attention row identical.
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(ws.path().join("data/manifest.json")).unwrap()).unwrap();
    let flat = &manifest.samples[1];
    save_embedding(&FeatureMatrix::<f32>::filled(5, 8, 0.25), ws.path().join("data").join(&flat.molecule)).unwrap();

    let o = ws.run(&[
        "export-attention",
        "--checkpoint",
        "out/checkpoint.bin",
        "--manifest",
        "data/manifest.json",
        "--sample",
        "S00000",
        "--sample",
        &flat.sample_id,
        "--output-dir",
        "out",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read_scores = |id: &str| -> Vec<f64> {
        let text = fs::read_to_string(ws.path().join(format!("out/attention/{id}.scores.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("atom,score"));
        lines
            .enumerate()
            .map(|(i, l)| {
                let (atom, score) = l.split_once(',').unwrap();
                assert_eq!(atom.parse::<usize>().unwrap(), i);
                score.parse().unwrap()
            })
            .collect()
    };
    let first = read_scores("S00000");
    let m = mtp::data::load_embedding(ws.path().join("data").join(&manifest.samples[0].molecule))
        .unwrap()
        .shape()
        .0;
    assert_eq!(first.len(), m);
    assert!(first.iter().all(|s| (0.0..=1.0).contains(s)));
    assert_eq!(read_scores(&flat.sample_id), vec![0.5; 5]);
    // One self map plus one cross map per pocket layer.
    assert!(ws.path().join("out/attention/S00000.self_l0_h0.mtpe").is_file());
    assert!(ws.path().join("out/attention/S00000.cross_l2_h0.mtpe").is_file());

    let o = ws.run(&["export-attention", "--checkpoint", "out/checkpoint.bin", "--manifest", "data/manifest.json", "--sample", "S99999", "--output-dir", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("S99999"));
}

#[test]
fn output_dir_from_environment() {
    let ws = Workspace::new("regression");
    let o = Command::new(env!("CARGO_BIN_EXE_mtp"))
        .args(["train", "--config", "run.toml", "--quiet", "--epochs", "1"])
        .current_dir(ws.path())
        .env("MTP_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path().join("from-env/checkpoint.bin").is_file());
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&mtp(&["train", "--help"], dir.path()));
    for flag in [
        "--config",
        "--manifest",
        "--output-dir",
        "--d-model",
        "--n-layers",
        "--n-heads",
        "--ffn-hidden",
        "--dropout-p",
        "--enable-mts",
        "--enable-mps",
        "--enable-ffn",
        "--kv-concat-mol",
        "--adaln-style",
        "--task",
        "--model-seed",
        "--epochs",
        "--lr",
        "--beta1",
        "--beta2",
        "--eps",
        "--batch-size",
        "--patience",
        "--train-seed",
        "--eval-split",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let top = stdout(&mtp(&["--help"], dir.path()));
    for cmd in ["train", "eval", "gradcheck", "export-attention", "synth-data"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    let o = mtp(&["eval", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
