//! Command implementations: dataset generation, ledgered training, checkpoint
//! evaluation, soups, reports, and ledger verification.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};

use seedprop_core::affinity::{build_bundle, AffinityParams};
use seedprop_core::detector::{
    forward, run_experiment, DetectorConfig, ToyDetector, TrainConfig, TrainStats,
};
use seedprop_core::grid::{BinaryMask, ScalarField};
use seedprop_core::metrics::{self, EvalSummary};
use seedprop_core::soup::{equal_average, greedy_pair_average, sweep_interpolate, Checkpoint, SoupChoice};
use seedprop_core::synthgen::{generate_dataset, load_dataset, Dataset, SceneSpec};

use crate::config::RunConfig;
use crate::ledger::{self, ArtifactRef, RunRecord};
use crate::report;

/// Errors that should exit with code 2 (validation / ledger rejection).
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ValidationError {}

fn validation<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(anyhow::Error::new(ValidationError(msg.into())))
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => match RunConfig::load(p) {
            Ok(cfg) => Ok(cfg),
            Err(e) => validation(format!("config rejected: {e:#}")),
        },
    }
}

fn rel_to(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

pub fn cmd_generate(
    spec_path: Option<&Path>,
    n: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let spec: SceneSpec = match spec_path {
        None => SceneSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read scene spec {}", p.display()))?;
            match toml::from_str(&text) {
                Ok(s) => s,
                Err(e) => return validation(format!("scene spec rejected: {e}")),
            }
        }
    };
    if let Err(e) = spec.validate() {
        return validation(format!("scene spec rejected: {e}"));
    }
    let manifest = generate_dataset(&spec, n, seed, out)?;
    println!(
        "generated {} scenes into {} (manifest sha256 {})",
        manifest.records.len(),
        out.display(),
        manifest.manifest_hash
    );
    Ok(())
}

fn check_dataset_channels(cfg: &TrainConfig, dataset: &Dataset) -> anyhow::Result<()> {
    if let Some(scene) = dataset.scenes.first() {
        if scene.image.channels() != cfg.detector.in_channels {
            return validation(format!(
                "detector expects {} input channels but the dataset has {}",
                cfg.detector.in_channels,
                scene.image.channels()
            ));
        }
    }
    Ok(())
}

const SWEEP_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
    0.80, 0.85, 0.90, 0.95,
];

fn eval_checkpoint_on(
    detector: &ToyDetector,
    dataset: &Dataset,
    indices: &[usize],
    eval_cfg: &seedprop_core::metrics::EvalConfig,
) -> anyhow::Result<(EvalSummary, Vec<ScalarField>, Vec<BinaryMask>)> {
    let mut probs = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    for &i in indices {
        let scene = &dataset.scenes[i];
        let (_, _, prob) = forward(detector, &scene.image)?;
        probs.push(prob);
        gts.push(scene.gt.clone());
    }
    let summary = metrics::evaluate(&probs, &gts, eval_cfg, Some(&SWEEP_GRID))?;
    Ok((summary, probs, gts))
}

fn write_train_artifacts(
    out: &Path,
    stats: &TrainStats,
    resolved: &serde_json::Value,
) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let steps = out.join("steps.csv");
    stats.write_step_csv(std::io::BufWriter::new(std::fs::File::create(&steps)?))?;
    written.push(steps);
    let epochs = out.join("epochs.csv");
    stats.write_epoch_csv(std::io::BufWriter::new(std::fs::File::create(&epochs)?))?;
    written.push(epochs);
    if !stats.gate_log.is_empty() {
        let gate = out.join("gate.csv");
        stats.write_gate_csv(std::io::BufWriter::new(std::fs::File::create(&gate)?))?;
        written.push(gate);
    }
    for ck in &stats.checkpoints {
        let path = out.join(format!("checkpoint_epoch{:03}.json", ck.epoch));
        ck.save(&path)?;
        written.push(path);
    }
    if let Some(last) = stats.checkpoints.last() {
        let path = out.join("checkpoint_final.json");
        last.save(&path)?;
        written.push(path);
    }
    let resolved_path = out.join("resolved_config.json");
    std::fs::write(&resolved_path, serde_json::to_string_pretty(resolved)?)?;
    written.push(resolved_path);
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config_path: Option<&Path>,
    dataset_manifest: &Path,
    out: &Path,
    ledger_path: &Path,
    parent: Option<&str>,
    root: bool,
) -> anyhow::Result<()> {
    let cfg = load_run_config(config_path)?;
    let train_cfg = match cfg.to_train_config() {
        Ok(c) => c,
        Err(e) => return validation(format!("config rejected: {e:#}")),
    };
    let resolved = cfg.resolved_value();

    // The ledger must accept the config before any training happens.
    if root == parent.is_some() {
        return validation("exactly one of --root or --parent <run-id> is required");
    }
    let records = ledger::read(ledger_path)?;
    if let Err(e) = ledger::check_one_change(&records, parent, &resolved) {
        return validation(format!("ledger rejected the run: {e:#}"));
    }

    let dataset = match load_dataset(dataset_manifest) {
        Ok(d) => d,
        Err(e) => return validation(format!("dataset rejected: {e}")),
    };
    check_dataset_channels(&train_cfg, &dataset)?;

    let stats = run_experiment(&train_cfg, &dataset, Some(out))?;

    // Final evaluation with a threshold sweep for the record.
    let detector = match stats.checkpoints.last() {
        Some(ck) => ToyDetector::from_checkpoint(train_cfg.detector, ck)?,
        None => bail!("run produced no checkpoints"),
    };
    let (outcome, _, _) =
        eval_checkpoint_on(&detector, &dataset, dataset.eval_indices(), &train_cfg.eval)?;

    let artifact_paths = write_train_artifacts(out, &stats, &resolved)?;
    let ledger_dir = ledger_path.parent().unwrap_or(Path::new("."));
    let mut artifacts = Vec::new();
    for p in &artifact_paths {
        artifacts.push(ArtifactRef { path: rel_to(ledger_dir, p), sha256: ledger::sha256_file(p)? });
    }

    let record = RunRecord {
        run_id: String::new(),
        kind: "train".into(),
        label: cfg.label.clone(),
        config_hash: cfg.hash(),
        parent_run_id: parent.map(String::from),
        declared_change: None,
        seed: cfg.train.seed,
        dataset_manifest_hash: dataset.manifest_hash.clone(),
        resolved_config: resolved,
        outcome: Some(outcome.clone()),
        artifacts,
        soup: None,
        timestamp: ledger::timestamp(),
    };
    let record = match ledger::append(ledger_path, record) {
        Ok(r) => r,
        Err(e) => return validation(format!("ledger rejected the run: {e:#}")),
    };
    println!(
        "run {} ({}) finished: miou {:.4} niou {:.4} pd {:.4} fa {:.2} best-miou {:.4}@{:.2}",
        record.run_id,
        record.label,
        outcome.miou,
        outcome.niou,
        outcome.pd,
        outcome.fa,
        outcome.best_miou.unwrap_or(f64::NAN),
        outcome.best_threshold.unwrap_or(f64::NAN),
    );
    if stats.empty_negative_warnings > 0 {
        eprintln!(
            "warning: {} steps mined an empty hard-negative set",
            stats.empty_negative_warnings
        );
    }
    Ok(())
}

fn split_indices<'a>(dataset: &'a Dataset, split: &str) -> anyhow::Result<Vec<usize>> {
    match split {
        "val" => Ok(dataset.eval_indices().to_vec()),
        "train" => Ok(dataset.train_indices.clone()),
        "all" => Ok((0..dataset.scenes.len()).collect()),
        other => validation(format!("unknown split {other:?} (use train|val|all)")),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    dataset_manifest: &Path,
    threshold: Option<f64>,
    split: &str,
    out: Option<&Path>,
    ledger_path: Option<&Path>,
    dump_affinity: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return validation(format!("checkpoint rejected: {e}")),
    };
    let det_cfg = DetectorConfig::infer_from_checkpoint(&ck)?;
    let detector = ToyDetector::from_checkpoint(det_cfg, &ck)?;
    let dataset = match load_dataset(dataset_manifest) {
        Ok(d) => d,
        Err(e) => return validation(format!("dataset rejected: {e}")),
    };

    // Cross-check the checkpoint's run record, when a ledger is available:
    // a dataset mismatch is worth a warning but not an abort.
    if let Some(lp) = ledger_path {
        let records = ledger::read(lp)?;
        let file_hash = ledger::sha256_file(checkpoint)?;
        for rec in &records {
            let owns = rec.artifacts.iter().any(|a| a.sha256 == file_hash);
            if owns && rec.dataset_manifest_hash != dataset.manifest_hash {
                eprintln!(
                    "warning: checkpoint {} was recorded against dataset {} but this manifest hashes to {}",
                    &ck.hash[..8],
                    &rec.dataset_manifest_hash[..8.min(rec.dataset_manifest_hash.len())],
                    &dataset.manifest_hash[..8]
                );
            }
        }
    }

    let mut eval_cfg = seedprop_core::metrics::EvalConfig::default();
    if let Some(t) = threshold {
        eval_cfg.threshold = t;
    }
    if let Err(e) = eval_cfg.validate() {
        return validation(format!("eval config rejected: {e}"));
    }
    let indices = split_indices(&dataset, split)?;
    let (summary, probs, gts) = eval_checkpoint_on(&detector, &dataset, &indices, &eval_cfg)?;
    let masks: Vec<BinaryMask> = probs.iter().map(|p| p.threshold(eval_cfg.threshold)).collect();
    let rows = metrics::stratify(&masks, &gts, &eval_cfg)?;

    let text = report::eval_report_text(&summary, &rows, eval_cfg.threshold);
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &text)?;
        let mut csv = String::from("metric,value\n");
        csv.push_str(&format!("miou,{}\n", summary.miou));
        csv.push_str(&format!("niou,{}\n", summary.niou));
        csv.push_str(&format!("pd,{}\n", summary.pd));
        csv.push_str(&format!("fa,{}\n", summary.fa));
        if let Some(ar) = summary.area_ratio {
            csv.push_str(&format!("area_ratio,{ar}\n"));
        }
        if let (Some(bt), Some(bm)) = (summary.best_threshold, summary.best_miou) {
            csv.push_str(&format!("best_threshold,{bt}\nbest_miou,{bm}\n"));
        }
        std::fs::write(dir.join("report.csv"), csv)?;
        let mut bins = String::from("bin,count,iou,area_ratio,pd\n");
        for row in &rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            bins.push_str(&format!(
                "{},{},{},{},{}\n",
                row.bin.label(),
                row.count,
                opt(row.iou),
                opt(row.area_ratio),
                opt(row.pd)
            ));
        }
        std::fs::write(dir.join("bins.csv"), bins)?;
    }
    if let Some(dir) = dump_affinity {
        let params = AffinityParams::default();
        for (k, &i) in indices.iter().enumerate() {
            let scene = &dataset.scenes[i];
            let (features, _, _) = forward(&detector, &scene.image)?;
            let bundle = build_bundle(&features, &scene.image, &scene.points, &params)?;
            bundle.dump_csv(&dir.join(format!("scene_{k:04}")))?;
        }
        println!("dumped {} affinity bundles into {}", indices.len(), dir.display());
    }
    Ok(())
}

pub fn cmd_soup(
    rule: &str,
    checkpoints: &[PathBuf],
    dataset_manifest: &Path,
    out: &Path,
    ledger_path: Option<&Path>,
    label: &str,
) -> anyhow::Result<()> {
    if checkpoints.is_empty() {
        return validation("soup needs at least one checkpoint");
    }
    let mut cks = Vec::with_capacity(checkpoints.len());
    for p in checkpoints {
        match Checkpoint::load(p) {
            Ok(c) => cks.push(c),
            Err(e) => return validation(format!("checkpoint {} rejected: {e}", p.display())),
        }
    }
    let dataset = match load_dataset(dataset_manifest) {
        Ok(d) => d,
        Err(e) => return validation(format!("dataset rejected: {e}")),
    };
    let det_cfg = DetectorConfig::infer_from_checkpoint(&cks[0])?;
    let eval_cfg = seedprop_core::metrics::EvalConfig::default();
    let indices = dataset.eval_indices().to_vec();
    let mut eval_fn = |ck: &Checkpoint| -> seedprop_core::Result<f64> {
        let det = ToyDetector::from_checkpoint(det_cfg, ck)?;
        let mut probs = Vec::with_capacity(indices.len());
        let mut gts = Vec::with_capacity(indices.len());
        for &i in &indices {
            let scene = &dataset.scenes[i];
            let (_, _, prob) = forward(&det, &scene.image)?;
            probs.push(prob.threshold(eval_cfg.threshold));
            gts.push(scene.gt.clone());
        }
        metrics::miou(&probs, &gts)
    };

    let (souped, choice) = match rule {
        "equal" => {
            let ck = equal_average(&cks)?;
            let score = eval_fn(&ck)?;
            let choice = SoupChoice {
                rule: "equal".into(),
                input_hashes: cks.iter().map(|c| c.hash.clone()).collect(),
                chosen_pair: None,
                chosen_alpha: None,
                score,
            };
            (ck, choice)
        }
        "greedy" => {
            if cks.len() < 2 {
                return validation("greedy soup needs at least two checkpoints");
            }
            greedy_pair_average(&cks, &mut eval_fn)?
        }
        "sweep" => {
            if cks.len() != 2 {
                return validation("sweep soup interpolates exactly two checkpoints");
            }
            let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            sweep_interpolate(&cks[0], &cks[1], &alphas, &mut eval_fn)?
        }
        other => return validation(format!("unknown soup rule {other:?} (equal|greedy|sweep)")),
    };

    std::fs::create_dir_all(out)?;
    let ck_path = out.join("soup_checkpoint.json");
    souped.save(&ck_path)?;
    let detector = ToyDetector::from_checkpoint(det_cfg, &souped)?;
    let (summary, _, _) = eval_checkpoint_on(&detector, &dataset, &indices, &eval_cfg)?;
    let provenance = serde_json::json!({
        "rule": choice.rule,
        "inputs": checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "input_hashes": choice.input_hashes,
        "chosen_pair": choice.chosen_pair,
        "chosen_alpha": choice.chosen_alpha,
        "selection_score": choice.score,
        "result_hash": souped.hash,
        "outcome": summary,
    });
    let prov_path = out.join("provenance.json");
    std::fs::write(&prov_path, serde_json::to_string_pretty(&provenance)?)?;
    println!(
        "soup ({}) -> {}: miou {:.4} niou {:.4} pd {:.4} fa {:.2}",
        choice.rule,
        ck_path.display(),
        summary.miou,
        summary.niou,
        summary.pd,
        summary.fa
    );

    if let Some(lp) = ledger_path {
        let ledger_dir = lp.parent().unwrap_or(Path::new("."));
        let mut artifacts = Vec::new();
        for p in [&ck_path, &prov_path] {
            artifacts.push(ArtifactRef {
                path: rel_to(ledger_dir, p),
                sha256: ledger::sha256_file(p)?,
            });
        }
        let record = RunRecord {
            run_id: String::new(),
            kind: "soup".into(),
            label: label.to_string(),
            config_hash: souped.hash.clone(),
            parent_run_id: None,
            declared_change: None,
            seed: 0,
            dataset_manifest_hash: dataset.manifest_hash.clone(),
            resolved_config: provenance,
            outcome: Some(summary),
            artifacts,
            soup: Some(choice),
            timestamp: ledger::timestamp(),
        };
        let record = ledger::append(lp, record)
            .map_err(|e| anyhow!(ValidationError(format!("ledger rejected the soup: {e:#}"))))?;
        println!("recorded as {}", record.run_id);
    }
    Ok(())
}

pub fn cmd_report(ledger_path: &Path, out: &Path) -> anyhow::Result<()> {
    let records = ledger::read(ledger_path)?;
    if records.is_empty() {
        return validation("ledger has no runs to report");
    }
    std::fs::create_dir_all(out)?;
    report::write_report(&records, out)?;
    println!("report written to {}", out.display());
    Ok(())
}

pub fn cmd_ledger_verify(ledger_path: &Path) -> anyhow::Result<()> {
    let problems = ledger::verify(ledger_path)?;
    let records = ledger::read(ledger_path)?;
    if problems.is_empty() {
        println!("ledger OK ({} records)", records.len());
        Ok(())
    } else {
        for p in &problems {
            eprintln!("ledger violation: {p}");
        }
        validation(format!("ledger verification failed with {} problem(s)", problems.len()))
    }
}
