//! Run configuration: a plain-text nested key-value document covering every
//! tunable, fully resolved before use so the one-change rule compares like
//! with like. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seedprop_core::affinity::{AffinityParams, WinnerRule};
use seedprop_core::detector::{Axes, DetectorConfig, FailureSwitches, TrainConfig};
use seedprop_core::grid::Connectivity;
use seedprop_core::losses::{LossWeights, OhemConfig};
use seedprop_core::metrics::{EvalConfig, FaVariant};
use seedprop_core::stabilizers::{GateConfig, MixSchedule, PropDecaySchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub label: String,
    pub train: TrainSection,
    pub detector: DetectorSection,
    pub affinity: AffinitySection,
    pub loss: LossSection,
    pub ohem: OhemSection,
    pub axes: AxesSection,
    pub failures: FailureSection,
    pub schedule: ScheduleSection,
    pub ltd: LtdSection,
    pub gate: GateSection,
    pub eval: EvalSection,
    pub checkpoints: CheckpointSection,
    pub margin: MarginSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub conv_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinitySection {
    pub m_hard: f64,
    pub sigma_s: f64,
    pub sigma_c: f64,
    /// "argmax_cosine" or "max_product".
    pub winner_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub w_seed: f64,
    pub lambda0: f64,
    pub w_bg: f64,
    pub w_sparse: f64,
    pub w_cons: f64,
    pub w_ctr: f64,
    pub m_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemSection {
    pub k_frac: f64,
    pub exclusion_radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxesSection {
    pub decay: bool,
    pub ltd: bool,
    pub hbc: bool,
    pub asg: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureSection {
    pub full_detach: bool,
    pub global_teacher: bool,
    pub positive_prototype: bool,
    pub free_radius: bool,
    pub shallow_fusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub decay_start: usize,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LtdSection {
    pub ema_decay: f64,
    pub alpha_max: f64,
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub disk_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub radii: Vec<usize>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub match_dist: f64,
    pub bin_edges: [usize; 3],
    pub fa_all_pixels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSection {
    pub last_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginSection {
    pub bg_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "run".into(),
            train: TrainSection::default(),
            detector: DetectorSection::default(),
            affinity: AffinitySection::default(),
            loss: LossSection::default(),
            ohem: OhemSection::default(),
            axes: AxesSection::default(),
            failures: FailureSection::default(),
            schedule: ScheduleSection::default(),
            ltd: LtdSection::default(),
            gate: GateSection::default(),
            eval: EvalSection::default(),
            checkpoints: CheckpointSection::default(),
            margin: MarginSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 8, lr: 0.05, momentum: 0.9, seed: 1 }
    }
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { in_channels: 1, feat_channels: 16, conv_layers: 3 }
    }
}

impl Default for AffinitySection {
    fn default() -> Self {
        Self { m_hard: 0.7, sigma_s: 4.0, sigma_c: 0.15, winner_rule: "argmax_cosine".into() }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        Self { w_seed: 2.0, lambda0: 1.0, w_bg: 2.0, w_sparse: 1.0, w_cons: 1.0, w_ctr: 1.0, m_neg: 0.3 }
    }
}

impl Default for OhemSection {
    fn default() -> Self {
        Self { k_frac: 0.01, exclusion_radius: 6.0 }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { decay_start: 30, floor: 0.1 }
    }
}

impl Default for LtdSection {
    fn default() -> Self {
        Self { ema_decay: 0.99, alpha_max: 0.5, ramp_start: 30, ramp_end: 50, disk_radius: 6.0 }
    }
}

impl Default for GateSection {
    fn default() -> Self {
        Self { radii: vec![2, 4, 6, 8, 12], tau: vec![0.5, 0.6, 0.7, 0.8, 0.9] }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { threshold: 0.55, match_dist: 3.0, bin_edges: [10, 30, 80], fa_all_pixels: false }
    }
}

impl Default for CheckpointSection {
    fn default() -> Self {
        Self { last_frac: 0.25 }
    }
}

impl Default for MarginSection {
    fn default() -> Self {
        Self { bg_samples: 64 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }

    /// Lowers the document into the training configuration, wiring the
    /// schedule horizon to the epoch count.
    pub fn to_train_config(&self) -> anyhow::Result<TrainConfig> {
        let winner_rule = match self.affinity.winner_rule.as_str() {
            "argmax_cosine" => WinnerRule::ArgmaxCosine,
            "max_product" => WinnerRule::MaxProduct,
            other => anyhow::bail!("unknown affinity.winner_rule {other:?}"),
        };
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            seed: self.train.seed,
            detector: DetectorConfig {
                in_channels: self.detector.in_channels,
                feat_channels: self.detector.feat_channels,
                conv_layers: self.detector.conv_layers,
            },
            affinity: AffinityParams {
                m_hard: self.affinity.m_hard,
                sigma_s: self.affinity.sigma_s,
                sigma_c: self.affinity.sigma_c,
                winner_rule,
            },
            weights: LossWeights {
                w_seed: self.loss.w_seed,
                lambda_prop: self.loss.lambda0,
                w_bg: self.loss.w_bg,
                w_sparse: self.loss.w_sparse,
                w_cons: self.loss.w_cons,
                w_ctr: self.loss.w_ctr,
            },
            ohem: OhemConfig {
                k_frac: self.ohem.k_frac,
                exclusion_radius: self.ohem.exclusion_radius,
            },
            m_neg: self.loss.m_neg,
            axes: Axes {
                decay: self.axes.decay,
                ltd: self.axes.ltd,
                hbc: self.axes.hbc,
                asg: self.axes.asg,
            },
            failures: FailureSwitches {
                full_detach: self.failures.full_detach,
                global_teacher: self.failures.global_teacher,
                positive_prototype: self.failures.positive_prototype,
                free_radius: self.failures.free_radius,
                shallow_fusion: self.failures.shallow_fusion,
            },
            schedule: PropDecaySchedule {
                lambda0: self.loss.lambda0,
                decay_start: self.schedule.decay_start.min(self.train.epochs.saturating_sub(1)),
                total_epochs: self.train.epochs.max(1),
                floor: self.schedule.floor,
            },
            mix: MixSchedule {
                alpha_max: self.ltd.alpha_max,
                ramp_start: self.ltd.ramp_start,
                ramp_end: self.ltd.ramp_end,
                disk_radius: self.ltd.disk_radius,
            },
            ema_decay: self.ltd.ema_decay,
            gate: GateConfig { radii: self.gate.radii.clone(), tau: self.gate.tau.clone() },
            eval: EvalConfig {
                threshold: self.eval.threshold,
                match_dist: self.eval.match_dist,
                bin_edges: self.eval.bin_edges,
                connectivity: Connectivity::Eight,
                fa_variant: if self.eval.fa_all_pixels {
                    FaVariant::AllPixels
                } else {
                    FaVariant::UnmatchedComponents
                },
            },
            checkpoint_last_frac: self.checkpoints.last_frac,
            margin_bg_samples: self.margin.bg_samples,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON value of the fully resolved document.
    pub fn resolved_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 over the canonical (sorted-key) JSON resolution.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_string(&self.resolved_value()).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Flattens a JSON document into `path -> rendered value` pairs.
pub fn flatten(value: &serde_json::Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&path, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    walk("", value, &mut out);
    out.sort();
    out
}

/// One changed field between two resolved configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub path: String,
    pub old: String,
    pub new: String,
}

/// Field-by-field diff of two resolved configs.
pub fn diff(parent: &serde_json::Value, child: &serde_json::Value) -> Vec<FieldChange> {
    let a: std::collections::BTreeMap<String, String> = flatten(parent).into_iter().collect();
    let b: std::collections::BTreeMap<String, String> = flatten(child).into_iter().collect();
    let mut changes = Vec::new();
    for (path, new) in &b {
        match a.get(path) {
            Some(old) if old == new => {}
            Some(old) => changes.push(FieldChange {
                path: path.clone(),
                old: old.clone(),
                new: new.clone(),
            }),
            None => changes.push(FieldChange {
                path: path.clone(),
                old: "<absent>".into(),
                new: new.clone(),
            }),
        }
    }
    for (path, old) in &a {
        if !b.contains_key(path) {
            changes.push(FieldChange {
                path: path.clone(),
                old: old.clone(),
                new: "<absent>".into(),
            });
        }
    }
    changes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::default();
        cfg.to_train_config().unwrap();
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[train]\nepochs = 3\nbogus_field = 1\n");
        assert!(err.is_err());
        let msg = format!("{:#}", err.unwrap_err());
        assert!(msg.contains("bogus_field"), "{msg}");
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn diff_detects_single_change() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr = 0.01;
        let changes = diff(&a.resolved_value(), &b.resolved_value());
        assert_eq!(changes.len(), 1);
        assert_eq!(changes[0].path, "train.lr");
        assert_eq!(changes[0].old, "0.05");
        assert_eq!(changes[0].new, "0.01");
    }

    #[test]
    fn diff_lists_every_change() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr = 0.01;
        b.affinity.m_hard = 0.3;
        let changes = diff(&a.resolved_value(), &b.resolved_value());
        let paths: Vec<&str> = changes.iter().map(|c| c.path.as_str()).collect();
        assert_eq!(paths, vec!["affinity.m_hard", "train.lr"]);
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = RunConfig::from_toml_str("[train]\nepochs = 60\n").unwrap();
        let b = RunConfig::from_toml_str("").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml_str("[train]\nepochs = 61\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
