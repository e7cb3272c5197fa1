//! End-to-end command tests on a miniature dataset: generate, ledgered
//! trains, eval, soups, report, and ledger verification, including exit
//! codes and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seedprop")
}

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(name: &str) -> Self {
        let root = std::env::temp_dir().join(format!("seedprop_cli_{name}"));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        Self { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> std::process::Output {
        Command::new(bin())
            .current_dir(&self.root)
            .args(args)
            .output()
            .expect("binary runs")
    }

    fn run_ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "command {:?} failed:\nstdout: {}\nstderr: {}",
            args,
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).to_string()
    }
}

fn write_scene_spec(dir: &Path) -> PathBuf {
    let path = dir.join("scene.toml");
    std::fs::write(
        &path,
        r#"
height = 24
width = 24
targets_min = 1
targets_max = 2
bin_mix = [0.4, 0.6, 0.0, 0.0]
aniso_max = 1.5
clutter_min = 1
clutter_max = 2
"#,
    )
    .unwrap();
    path
}

fn write_train_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const TINY_TRAIN: &str = r#"
label = "tiny"
[train]
epochs = 2
batch_size = 4
lr = 0.01
[ohem]
exclusion_radius = 3.0
k_frac = 0.02
[schedule]
decay_start = 1
"#;

#[test]
fn generate_is_reproducible_and_rejects_bad_specs() {
    let ws = Workspace::new("generate");
    let spec = write_scene_spec(&ws.root);
    let out1 = ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "4", "--seed", "7", "--out", "data",
    ]);
    let hash1 = out1.split_whitespace().last().unwrap().trim_end_matches(')').to_string();
    let out2 = ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "4", "--seed", "7", "--out", "data",
    ]);
    assert!(out2.contains(&hash1), "regenerated manifest hash must match");

    // Malformed spec: unknown field is named in the rejection.
    let bad = ws.path("bad.toml");
    std::fs::write(&bad, "height = 24\nwidht = 24\n").unwrap();
    let out = ws.run(&["generate", "--spec", bad.to_str().unwrap(), "--n", "1", "--out", "d2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn train_eval_soup_report_roundtrip() {
    let ws = Workspace::new("roundtrip");
    let spec = write_scene_spec(&ws.root);
    ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "6", "--seed", "3", "--out", "data",
    ]);
    let cfg = write_train_config(&ws.root, "tiny.toml", TINY_TRAIN);

    // Root run.
    let out = ws.run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/root",
        "--ledger",
        "ledger.jsonl",
        "--root",
    ]);
    assert!(out.contains("r0000-"), "{out}");
    assert!(ws.path("runs/root/steps.csv").exists());
    assert!(ws.path("runs/root/epochs.csv").exists());
    assert!(ws.path("runs/root/checkpoint_final.json").exists());

    // Child with exactly one change is accepted.
    let child = write_train_config(
        &ws.root,
        "child.toml",
        &TINY_TRAIN.replace("lr = 0.01", "lr = 0.005"),
    );
    let out = ws.run_ok(&[
        "train",
        "--config",
        child.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/child",
        "--ledger",
        "ledger.jsonl",
        "--parent",
        &extract_run_id(&out),
    ]);
    assert!(out.contains("r0001-"), "{out}");

    // Eval the root checkpoint.
    let out = ws.run_ok(&[
        "eval",
        "--checkpoint",
        "runs/root/checkpoint_final.json",
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "eval_out",
        "--threshold",
        "0.5",
    ]);
    assert!(out.contains("threshold 0.5"), "{out}");
    assert!(ws.path("eval_out/report.csv").exists());
    assert!(ws.path("eval_out/bins.csv").exists());

    // Repeat eval is bit-identical.
    let r1 = std::fs::read(ws.path("eval_out/report.csv")).unwrap();
    ws.run_ok(&[
        "eval",
        "--checkpoint",
        "runs/root/checkpoint_final.json",
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "eval_out2",
        "--threshold",
        "0.5",
    ]);
    let r2 = std::fs::read(ws.path("eval_out2/report.csv")).unwrap();
    assert_eq!(r1, r2);

    // Soups over the run's trailing checkpoints.
    let cks: Vec<String> = std::fs::read_dir(ws.path("runs/root"))
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            (name.starts_with("checkpoint_epoch")).then(|| p.to_string_lossy().to_string())
        })
        .collect();
    assert!(cks.len() >= 2 || !cks.is_empty());
    let mut args = vec![
        "soup",
        "--rule",
        "equal",
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "soups/equal",
        "--ledger",
        "ledger.jsonl",
    ];
    let ck_refs: Vec<&str> = cks.iter().map(String::as_str).collect();
    args.extend(ck_refs.iter());
    let out = ws.run_ok(&args);
    assert!(out.contains("soup (equal)"), "{out}");
    assert!(ws.path("soups/equal/soup_checkpoint.json").exists());
    assert!(ws.path("soups/equal/provenance.json").exists());

    // Report over the ledger.
    ws.run_ok(&["report", "--ledger", "ledger.jsonl", "--out", "report"]);
    for f in ["main_results.csv", "main_results.txt", "pareto.csv", "dynamics_index.csv"] {
        assert!(ws.path(&format!("report/{f}")).exists(), "{f}");
    }
    let pareto = std::fs::read_to_string(ws.path("report/pareto.csv")).unwrap();
    // Two train runs plus one soup = three Pareto points after the header.
    assert_eq!(pareto.lines().count(), 4, "{pareto}");

    // Report regeneration is deterministic.
    let main1 = std::fs::read(ws.path("report/main_results.csv")).unwrap();
    ws.run_ok(&["report", "--ledger", "ledger.jsonl", "--out", "report2"]);
    let main2 = std::fs::read(ws.path("report2/main_results.csv")).unwrap();
    assert_eq!(main1, main2);

    // Ledger verifies clean.
    let out = ws.run_ok(&["ledger-verify", "--ledger", "ledger.jsonl"]);
    assert!(out.contains("ledger OK"), "{out}");
}

fn extract_run_id(stdout: &str) -> String {
    stdout
        .split_whitespace()
        .find(|w| w.starts_with('r') && w.contains('-'))
        .expect("run id in output")
        .to_string()
}

#[test]
fn two_field_change_is_rejected_with_both_paths() {
    let ws = Workspace::new("twofield");
    let spec = write_scene_spec(&ws.root);
    ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "4", "--seed", "5", "--out", "data",
    ]);
    let cfg = write_train_config(&ws.root, "root.toml", TINY_TRAIN);
    let out = ws.run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/root",
        "--ledger",
        "ledger.jsonl",
        "--root",
    ]);
    let root_id = extract_run_id(&out);

    let two = write_train_config(
        &ws.root,
        "two.toml",
        &TINY_TRAIN.replace("lr = 0.01", "lr = 0.005").replace("epochs = 2", "epochs = 3"),
    );
    let out = ws.run(&[
        "train",
        "--config",
        two.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/two",
        "--ledger",
        "ledger.jsonl",
        "--parent",
        &root_id,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.lr") && stderr.contains("train.epochs"), "{stderr}");
    // Nothing appended.
    let ledger = std::fs::read_to_string(ws.path("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 1);
}

#[test]
fn repeated_train_is_bit_identical() {
    let ws = Workspace::new("determinism");
    let spec = write_scene_spec(&ws.root);
    ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "5", "--seed", "11", "--out", "data",
    ]);
    let cfg = write_train_config(&ws.root, "tiny.toml", TINY_TRAIN);
    for out_dir in ["runs/a", "runs/b"] {
        ws.run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--dataset",
            "data/manifest.jsonl",
            "--out",
            out_dir,
            "--ledger",
            "ledger.jsonl",
            "--root",
        ]);
    }
    for file in ["steps.csv", "epochs.csv", "checkpoint_final.json"] {
        let a = std::fs::read(ws.path(&format!("runs/a/{file}"))).unwrap();
        let b = std::fs::read(ws.path(&format!("runs/b/{file}"))).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new("badconfig");
    let spec = write_scene_spec(&ws.root);
    ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "4", "--seed", "2", "--out", "data",
    ]);
    let bad = write_train_config(&ws.root, "bad.toml", "[train]\nepoochs = 2\n");
    let out = ws.run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/bad",
        "--ledger",
        "ledger.jsonl",
        "--root",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoochs"));
}

#[test]
fn requires_root_or_parent() {
    let ws = Workspace::new("noparent");
    let spec = write_scene_spec(&ws.root);
    ws.run_ok(&[
        "generate", "--spec", spec.to_str().unwrap(), "--n", "4", "--seed", "2", "--out", "data",
    ]);
    let cfg = write_train_config(&ws.root, "tiny.toml", TINY_TRAIN);
    let out = ws.run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        "data/manifest.jsonl",
        "--out",
        "runs/x",
        "--ledger",
        "ledger.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
