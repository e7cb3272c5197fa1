//! A tiny differentiable detector (3-layer conv stack plus a 1x1 logit head)
//! and the training loop that generates its own supervision in-batch: seed
//! affinity targets, stabilizer axes, failure-mode switches, and the per-step
//! split of the feature gradient into the logit-head ("desired") term and the
//! propagation-term ("drift") contribution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{local_prior, AffinityParams, WinnerField, WinnerRule};
use crate::error::{Error, Result};
use crate::grid::{l2_normalize_channels, BinaryMask, FeatureMap, Image, PointSet, ScalarField, EPS_NORM};
use crate::losses::{
    composite_loss, mine_hard_background, AuditProbe, DiscreteTrace, LossBreakdown,
    LossComponents, LossWeights, OhemConfig, EPS_LOG, EPS_PROP,
};
use crate::metrics::{self, EvalConfig, EvalSummary};
use crate::soup::{Checkpoint, Segment};
use crate::stabilizers::{
    adaptive_support_gate, apply_gate_to_prior, ema_update, lambda_prop_at, predmix_target,
    support_scores, GateConfig, MixSchedule, PropDecaySchedule, TeacherState,
};
use crate::synthgen::{Dataset, Scene};
use crate::tape::{l2_norm, NodeId, PathTag, Tape};

/// Detector architecture knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    /// Number of 3x3 conv layers (3 or 4); the last one emits the feature
    /// map without a nonlinearity so cosines span the full range.
    pub conv_layers: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { in_channels: 1, feat_channels: 16, conv_layers: 3 }
    }
}

impl DetectorConfig {
    /// Reconstructs the architecture from a checkpoint's segment shapes.
    pub fn infer_from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let n = ck.segments.len();
        if n < 8 || n % 2 != 0 {
            return Err(Error::IncompatibleCheckpoints(format!(
                "unexpected segment count {n}"
            )));
        }
        let conv_layers = (n - 2) / 2;
        let feat_channels = ck.segments[1].values.len();
        if feat_channels == 0 || ck.segments[0].values.len() % (9 * feat_channels) != 0 {
            return Err(Error::IncompatibleCheckpoints("malformed conv1 shapes".into()));
        }
        let in_channels = ck.segments[0].values.len() / (9 * feat_channels);
        let cfg = Self { in_channels, feat_channels, conv_layers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::InvalidParameter("in_channels must be 1 or 3".into()));
        }
        if !(3..=4).contains(&self.conv_layers) {
            return Err(Error::InvalidParameter("conv_layers must be 3 or 4".into()));
        }
        if self.feat_channels == 0 {
            return Err(Error::InvalidParameter("feat_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SegmentSpec {
    name: String,
    offset: usize,
    len: usize,
}

/// The detector: a flat parameter vector with named segments.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    cfg: DetectorConfig,
    params: Vec<f64>,
    segments: Vec<SegmentSpec>,
}

impl ToyDetector {
    /// Seeded initialization: uniform fan-in scaled weights, zero biases,
    /// and a negative head bias so initial probabilities sit near 0.1.
    pub fn init(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut segments: Vec<SegmentSpec> = Vec::new();
        let mut params: Vec<f64> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let push = |name: String, len: usize, params: &mut Vec<f64>, segs: &mut Vec<SegmentSpec>| {
            segs.push(SegmentSpec { name, offset: params.len(), len });
            params.resize(params.len() + len, 0.0);
        };
        let c = cfg.feat_channels;
        for layer in 0..cfg.conv_layers {
            let c_in = if layer == 0 { cfg.in_channels } else { c };
            push(format!("conv{}_w", layer + 1), c * c_in * 9, &mut params, &mut segments);
            let seg = segments.last().unwrap();
            let scale = (6.0 / (9 * c_in) as f64).sqrt();
            for i in seg.offset..seg.offset + seg.len {
                params[i] = rng.random_range(-scale..scale);
            }
            push(format!("conv{}_b", layer + 1), c, &mut params, &mut segments);
        }
        push("head_w".into(), c, &mut params, &mut segments);
        let seg = segments.last().unwrap();
        let scale = (6.0 / c as f64).sqrt();
        for i in seg.offset..seg.offset + seg.len {
            params[i] = rng.random_range(-scale..scale);
        }
        push("head_b".into(), 1, &mut params, &mut segments);
        let head_b = segments.last().unwrap().offset;
        params[head_b] = -2.0;
        Ok(Self { cfg, params, segments })
    }

    pub fn config(&self) -> DetectorConfig {
        self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                got: format!("{}", params.len()),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                name: s.name.clone(),
                values: self.params[s.offset..s.offset + s.len].to_vec(),
            })
            .collect();
        Checkpoint::new(epoch, segments)
    }

    pub fn from_checkpoint(cfg: DetectorConfig, ck: &Checkpoint) -> Result<Self> {
        let mut detector = Self::init(cfg, 0)?;
        detector.load_checkpoint(ck)?;
        Ok(detector)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.segments.len() != self.segments.len() {
            return Err(Error::IncompatibleCheckpoints(format!(
                "expected {} segments, checkpoint has {}",
                self.segments.len(),
                ck.segments.len()
            )));
        }
        for (spec, seg) in self.segments.iter().zip(&ck.segments) {
            if spec.name != seg.name || spec.len != seg.values.len() {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "segment {} ({} values) vs checkpoint {} ({} values)",
                    spec.name,
                    spec.len,
                    seg.name,
                    seg.values.len()
                )));
            }
        }
        for (spec, seg) in self.segments.iter().zip(&ck.segments) {
            self.params[spec.offset..spec.offset + spec.len].copy_from_slice(&seg.values);
        }
        Ok(())
    }
}

/// Which stabilizer axes are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Axes {
    pub decay: bool,
    pub ltd: bool,
    pub hbc: bool,
    pub asg: bool,
}

/// Pathological configurations from the failure map, each runnable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FailureSwitches {
    /// Sever every gradient path through the affinity construction.
    pub full_detach: bool,
    /// Blend the teacher everywhere instead of inside seed disks only.
    pub global_teacher: bool,
    /// Add a symmetric pull of high-affinity pixels toward the prototype.
    pub positive_prototype: bool,
    /// Disable the gate's reliability thresholds (free adaptive radius).
    pub free_radius: bool,
    /// Concatenate first-layer activations into the affinity feature.
    pub shallow_fusion: bool,
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub affinity: AffinityParams,
    pub weights: LossWeights,
    pub ohem: OhemConfig,
    /// Contrastive margin of the hard-background branch.
    pub m_neg: f64,
    pub axes: Axes,
    pub failures: FailureSwitches,
    pub schedule: PropDecaySchedule,
    pub mix: MixSchedule,
    pub ema_decay: f64,
    pub gate: GateConfig,
    pub eval: EvalConfig,
    /// Fraction of trailing epochs whose checkpoints are kept for soups.
    pub checkpoint_last_frac: f64,
    /// Background sample count of the margin diagnostic.
    pub margin_bg_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            seed: 1,
            detector: DetectorConfig::default(),
            affinity: AffinityParams::default(),
            weights: LossWeights { w_ctr: 1.0, ..Default::default() },
            ohem: OhemConfig::default(),
            m_neg: 0.3,
            axes: Axes::default(),
            failures: FailureSwitches::default(),
            schedule: PropDecaySchedule {
                lambda0: 1.0,
                decay_start: 30,
                total_epochs: 60,
                floor: 0.1,
            },
            mix: MixSchedule { alpha_max: 0.5, ramp_start: 30, ramp_end: 50, disk_radius: 6.0 },
            ema_decay: 0.99,
            gate: GateConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_last_frac: 0.25,
            margin_bg_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.affinity.validate()?;
        self.weights.validate()?;
        self.ohem.validate()?;
        self.gate.validate()?;
        self.eval.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("need lr >= 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidParameter("ema_decay must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.checkpoint_last_frac) {
            return Err(Error::InvalidParameter("checkpoint_last_frac must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.m_neg) {
            return Err(Error::InvalidParameter("m_neg must be in [0, 1)".into()));
        }
        if self.epochs > 0 && (self.axes.decay || self.axes.ltd) {
            self.schedule.validate()?;
        }
        if self.epochs > 0 && self.uses_teacher() {
            self.mix.validate()?;
        }
        Ok(())
    }

    fn uses_teacher(&self) -> bool {
        self.axes.ltd || self.failures.global_teacher
    }

    fn uses_gate(&self) -> bool {
        self.axes.asg || self.failures.free_radius
    }

    fn effective_w_ctr(&self) -> f64 {
        if self.axes.hbc || self.failures.positive_prototype {
            self.weights.w_ctr
        } else {
            0.0
        }
    }

    /// Scheduled propagation weight for an epoch.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.axes.decay || self.axes.ltd {
            lambda_prop_at(&self.schedule, epoch)
        } else {
            self.schedule.lambda0
        }
    }

    /// Scheduled PredMix blend for an epoch (0 when no teacher source).
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if self.uses_teacher() {
            self.mix.alpha_at(epoch)
        } else {
            0.0
        }
    }
}

/// One gate decision, logged per seed per image per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub epoch: usize,
    pub image_index: usize,
    pub seed_index: usize,
    pub r_star: usize,
    pub scores: Vec<(f64, f64)>,
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub lambda_prop: f64,
    /// Norm of the total gradient that reached the feature map through the
    /// target-construction path (the tape-tag assertion quantity).
    pub target_path_grad_norm: f64,
}

/// Per-epoch record: loss aggregates and validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda_prop: f64,
    pub alpha_t: f64,
    pub loss: LossBreakdown,
    pub target_path_grad_norm: f64,
    pub eval: EvalSummary,
    pub margin: f64,
    pub mean_matched_pred_area: Option<f64>,
    /// Mean per-seed connected support of the sharpened affinity (a > 0.5),
    /// in pixels: how far seed affinity has expanded.
    pub affinity_support_px: f64,
    /// The same support divided by each seed's ground-truth component area.
    pub affinity_area_ratio: f64,
}

/// Everything a run produces, reproducible bit-exactly from (config, seed,
/// dataset).
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub gate_log: Vec<GateDecision>,
    pub final_eval: Option<EvalSummary>,
    pub empty_negative_warnings: usize,
}

struct ForwardNodes {
    param_nodes: Vec<NodeId>,
    h1: NodeId,
    f_node: NodeId,
    logits_node: NodeId,
    prob_node: NodeId,
}

fn taped_forward(
    tape: &mut Tape,
    detector: &ToyDetector,
    params: &[f64],
    img: &Image,
) -> Result<ForwardNodes> {
    let cfg = detector.cfg;
    let (h, w) = (img.height(), img.width());
    if img.channels() != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", cfg.in_channels),
            got: format!("{}", img.channels()),
        });
    }
    let mut param_nodes = Vec::with_capacity(detector.segments.len());
    for seg in &detector.segments {
        let values = params[seg.offset..seg.offset + seg.len].to_vec();
        param_nodes.push(tape.leaf_field(values, 1, seg.len, PathTag::Neutral));
    }
    let x = tape.leaf_stack(img.data().to_vec(), cfg.in_channels, h, w, PathTag::Neutral);
    let c = cfg.feat_channels;
    let mut cur = x;
    let mut h1 = x;
    for layer in 0..cfg.conv_layers {
        let wn = param_nodes[2 * layer];
        let bn = param_nodes[2 * layer + 1];
        let conv = tape.conv3x3(cur, wn, bn, c, PathTag::Neutral)?;
        if !tape.is_finite(conv) {
            return Err(Error::NumericalFailure { context: format!("conv{}", layer + 1) });
        }
        if layer + 1 < cfg.conv_layers {
            cur = tape.softplus(conv, PathTag::Neutral);
            if layer == 0 {
                h1 = cur;
            }
        } else {
            cur = conv;
        }
    }
    let f_node = cur;
    let head_w = param_nodes[2 * cfg.conv_layers];
    let head_b = param_nodes[2 * cfg.conv_layers + 1];
    let logits_stack = tape.conv1x1(f_node, head_w, head_b, 1, PathTag::Logit)?;
    if !tape.is_finite(logits_stack) {
        return Err(Error::NumericalFailure { context: "head".into() });
    }
    let logits_node = tape.stack_to_field(logits_stack, PathTag::Logit)?;
    let prob_node = tape.sigmoid(logits_node, PathTag::Logit);
    Ok(ForwardNodes { param_nodes, h1, f_node, logits_node, prob_node })
}

/// Plain forward pass: features, logits, probabilities. The returned
/// feature map is channel-centered, matching the geometry the affinity
/// construction sees. Deterministic given parameters; any non-finite
/// intermediate names the offending layer.
pub fn forward(
    detector: &ToyDetector,
    img: &Image,
) -> Result<(FeatureMap, ScalarField, ScalarField)> {
    let mut tape = Tape::new();
    let nodes = taped_forward(&mut tape, detector, &detector.params, img)?;
    let (h, w) = (img.height(), img.width());
    let centered = tape.center_channels(nodes.f_node, PathTag::Neutral)?;
    let features =
        FeatureMap::new(detector.cfg.feat_channels, h, w, tape.values(centered).to_vec())?;
    let logits = ScalarField::new(h, w, tape.values(nodes.logits_node).to_vec())?;
    let prob = ScalarField::new(h, w, tape.values(nodes.prob_node).to_vec())?;
    Ok((features, logits, prob))
}

/// Probability field under an arbitrary parameter vector (teacher, soups).
pub fn forward_prob_with(
    detector: &ToyDetector,
    params: &[f64],
    img: &Image,
) -> Result<ScalarField> {
    let mut tape = Tape::new();
    let nodes = taped_forward(&mut tape, detector, params, img)?;
    ScalarField::new(img.height(), img.width(), tape.values(nodes.prob_node).to_vec())
}

/// Everything one taped objective evaluation exposes.
struct TapedEval {
    tape: Tape,
    param_nodes: Vec<NodeId>,
    f_node: NodeId,
    total_node: NodeId,
    prop_node: NodeId,
    comps: LossComponents,
    cons_target: ScalarField,
    trace: DiscreteTrace,
    empty_negatives: bool,
    gate_decisions: Vec<GateDecision>,
}

/// Builds the full self-referential objective for one scene on a fresh tape:
/// forward, in-batch affinity target, optional gate/PredMix/contrast, and
/// the weighted total that carries gradients (the sparsity term consumes the
/// detached target and contributes value only).
#[allow(clippy::too_many_arguments)]
fn evaluate_scene(
    detector: &ToyDetector,
    params: &[f64],
    scene: &Scene,
    cfg: &TrainConfig,
    epoch: usize,
    image_index: usize,
    lambda_prop: f64,
    alpha_t: f64,
    teacher_prob: Option<&ScalarField>,
    cons_target_override: Option<&ScalarField>,
) -> Result<TapedEval> {
    let mut tape = Tape::new();
    let nodes = taped_forward(&mut tape, detector, params, &scene.image)?;
    let (h, w) = (scene.image.height(), scene.image.width());
    let hw = h * w;
    let seeds = &scene.points;
    let seed_idxs: Vec<usize> = seeds.points().iter().map(|&(r, c)| r * w + c).collect();
    let mut trace = DiscreteTrace::new();
    let mut gate_decisions = Vec::new();

    // Affinity input: the live feature map, a detached copy under
    // full_detach, or the shallow-fusion concatenation. Channels are
    // centered before normalization so cosines carry contrast rather than
    // the shared smooth component.
    let affinity_input = if cfg.failures.full_detach {
        let values = tape.values(nodes.f_node).to_vec();
        tape.leaf_stack(values, detector.cfg.feat_channels, h, w, PathTag::Neutral)
    } else if cfg.failures.shallow_fusion {
        tape.concat(nodes.f_node, nodes.h1, PathTag::Target)?
    } else {
        nodes.f_node
    };
    let centered = tape.center_channels(affinity_input, PathTag::Target)?;
    let normalized = tape.l2_normalize(centered, EPS_NORM, PathTag::Target)?;

    // Per-seed cosine fields; the winner rule decides the anchor per pixel.
    let mut cos_nodes = Vec::with_capacity(seed_idxs.len());
    for (k, &si) in seed_idxs.iter().enumerate() {
        let node = tape.cosine_vs_seed(normalized, si, PathTag::Target).map_err(|e| match e {
            Error::DegenerateSeed { .. } => {
                let (r, c) = seeds.points()[k];
                Error::DegenerateSeed { row: r, col: c }
            }
            other => other,
        })?;
        cos_nodes.push(node);
    }
    let m_hard = cfg.affinity.m_hard;
    let winner_vec: Vec<usize> = match cfg.affinity.winner_rule {
        WinnerRule::ArgmaxCosine => (0..hw)
            .map(|idx| {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for (k, &node) in cos_nodes.iter().enumerate() {
                    let v = tape.values(node)[idx];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                best_k
            })
            .collect(),
        WinnerRule::MaxProduct => {
            let denom = 1.0 - m_hard;
            (0..hw)
                .map(|idx| {
                    let (r, c) = (idx / w, idx % w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0;
                    for (k, &node) in cos_nodes.iter().enumerate() {
                        let t = (tape.values(node)[idx] - m_hard).max(0.0) / denom;
                        let prior = crate::affinity::prior_at(
                            &scene.image,
                            (r, c),
                            seeds.points()[k],
                            cfg.affinity.sigma_s,
                            cfg.affinity.sigma_c,
                        );
                        let v = t * t * prior;
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    best_k
                })
                .collect()
        }
    };
    trace.push_usizes(&winner_vec);
    let winner = WinnerField::new(h, w, winner_vec.clone());

    let s_node = tape.select_by_winner(cos_nodes, winner_vec, PathTag::Target)?;
    let a_node = tape.margin_sharpen(s_node, m_hard, PathTag::Target)?;
    // Margin support set: which pixels clear the hard margin.
    {
        let sv = tape.values(s_node);
        let support: Vec<usize> = (0..hw).filter(|&i| sv[i] > m_hard).collect();
        trace.push_usizes(&support);
    }

    // Local prior, optionally restricted by the adaptive support gate.
    let mut prior = local_prior(&scene.image, seeds, &winner, &cfg.affinity)?;
    if cfg.uses_gate() {
        // Gate scores come from the ungated target.
        let a_vals = tape.values(a_node);
        let ungated: Vec<f64> =
            a_vals.iter().zip(prior.data()).map(|(&a, &p)| a * p).collect();
        let ungated = ScalarField::new(h, w, ungated)?;
        let mut r_star = Vec::with_capacity(seeds.len());
        for (k, &seed) in seeds.points().iter().enumerate() {
            let scores: Vec<(f64, f64)> = cfg
                .gate
                .radii
                .iter()
                .map(|&r| support_scores(&ungated, seed, r))
                .collect::<Result<_>>()?;
            let r = if cfg.failures.free_radius {
                // Unregularized support maximization: the radius that
                // captures the most affinity mass, no reliability gate.
                // Mass is monotone in the radius, so this drifts to the
                // largest candidate.
                let mut best = (f64::NEG_INFINITY, cfg.gate.radii[0]);
                for &radius in &cfg.gate.radii {
                    let r_f = radius as f64;
                    let mut mass = 0.0;
                    for row in 0..h {
                        for col in 0..w {
                            let dr = row as f64 - seed.0 as f64;
                            let dc = col as f64 - seed.1 as f64;
                            if dr * dr + dc * dc <= r_f * r_f {
                                mass += ungated.get(row, col);
                            }
                        }
                    }
                    if mass > best.0 {
                        best = (mass, radius);
                    }
                }
                best.1
            } else {
                adaptive_support_gate(&scores, &cfg.gate)?
            };
            gate_decisions.push(GateDecision {
                epoch,
                image_index,
                seed_index: k,
                r_star: r,
                scores,
            });
            r_star.push(r);
        }
        trace.push_usizes(&r_star);
        prior = apply_gate_to_prior(&prior, &winner, seeds, &r_star)?;
    }

    let target_node = tape.mul_const(a_node, prior.data().to_vec(), PathTag::Target)?;
    let prop_node = tape.prop_loss(a_node, prior.data().to_vec(), EPS_PROP, PathTag::Target)?;

    // The constructed target leaves the tape as a stop-gradient constant:
    // the sparsity and consistency terms consume this detached field.
    let target_field =
        ScalarField::new(h, w, tape.values(target_node).to_vec())?.detach();
    let sparse_value = target_field.mean();

    let cons_target = match cons_target_override {
        Some(t) => t.clone(),
        None => match (teacher_prob, cfg.uses_teacher()) {
            (Some(tp), true) => {
                let radius = if cfg.failures.global_teacher {
                    ((h * h + w * w) as f64).sqrt() + 1.0
                } else {
                    cfg.mix.disk_radius
                };
                predmix_target(&target_field, tp, seeds, alpha_t, radius)?
            }
            _ => target_field.clone(),
        },
    };
    let cons_node = tape.mse_const(nodes.prob_node, cons_target.data().to_vec(), PathTag::Logit)?;

    // OHEM mining over current probabilities.
    let prob_field = ScalarField::new(h, w, tape.values(nodes.prob_node).to_vec())?;
    let mined = mine_hard_background(&prob_field, seeds, &cfg.ohem)?;
    trace.push_usizes(&mined);
    {
        // Clamp activity of the log terms is part of the discrete state.
        let pv = prob_field.data();
        let clamped_seeds = seed_idxs.iter().filter(|&&i| pv[i] < EPS_LOG).count();
        let clamped_bg = mined.iter().filter(|&&i| 1.0 - pv[i] < EPS_LOG).count();
        trace.push(clamped_seeds as u64);
        trace.push(clamped_bg as u64);
    }
    let bg_node = tape.ohem_bce(nodes.prob_node, mined.clone(), EPS_LOG, PathTag::Logit)?;
    let seed_node = tape.seed_bce(nodes.prob_node, seed_idxs.clone(), EPS_LOG, PathTag::Logit)?;

    // Hard-background contrast, plus the pathological positive pull.
    let w_ctr = cfg.effective_w_ctr();
    let mut empty_negatives = false;
    let ctr_node = if w_ctr > 0.0 {
        empty_negatives = mined.is_empty();
        let ctr = tape.contrast(normalized, seed_idxs.clone(), mined, cfg.m_neg, PathTag::Target)?;
        if cfg.failures.positive_prototype {
            let tv = target_field.data();
            let positives: Vec<usize> = (0..hw).filter(|&i| tv[i] > 0.5).collect();
            trace.push_usizes(&positives);
            let pull = tape.pull_toward(normalized, seed_idxs.clone(), positives, PathTag::Target)?;
            Some(tape.weighted_sum(vec![(ctr, 1.0), (pull, 1.0)], PathTag::Target))
        } else {
            Some(ctr)
        }
    } else {
        None
    };

    let mut terms = vec![
        (seed_node, cfg.weights.w_seed),
        (prop_node, lambda_prop),
        (bg_node, cfg.weights.w_bg),
        (cons_node, cfg.weights.w_cons),
    ];
    if let Some(ctr) = ctr_node {
        terms.push((ctr, w_ctr));
    }
    let total_node = tape.weighted_sum(terms, PathTag::Neutral);

    let comps = LossComponents {
        seed: tape.scalar_value(seed_node),
        prop: tape.scalar_value(prop_node),
        bg: tape.scalar_value(bg_node),
        sparse: sparse_value,
        cons: tape.scalar_value(cons_node),
        ctr: ctr_node.map(|n| tape.scalar_value(n)).unwrap_or(0.0),
    };

    Ok(TapedEval {
        tape,
        param_nodes: nodes.param_nodes,
        f_node: nodes.f_node,
        total_node,
        prop_node,
        comps,
        cons_target,
        trace,
        empty_negatives,
        gate_decisions,
    })
}

/// Plain SGD with momentum.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(param_count: usize) -> Self {
        Self { velocity: vec![0.0; param_count] }
    }
}

/// Outcome of one optimization step over a batch.
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub target_path_grad_norm: f64,
    pub empty_negative_warnings: usize,
    pub gate_decisions: Vec<GateDecision>,
}

/// One full training step: forward, affinity construction, optional
/// PredMix/ASG/HBC, composite loss, gradient step, EMA update.
///
/// The reported `grad_desired_norm` is the batch mean of the feature-map
/// gradient arriving through the logit head; `grad_drift_norm` is the batch
/// mean of the propagation term's contribution through the target path
/// (identically zero when `lambda_prop` is zero or the construction is
/// detached).
pub fn train_step(
    detector: &mut ToyDetector,
    opt: &mut SgdState,
    batch: &[(usize, &Scene)],
    teacher: &mut Option<TeacherState>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepOutcome> {
    let lambda_prop = cfg.lambda_at(epoch);
    let alpha_t = cfg.alpha_at(epoch);
    let mut grad_sum = vec![0.0; detector.params.len()];
    let mut comp_sum = LossComponents::default();
    let mut desired_sum = 0.0;
    let mut drift_sum = 0.0;
    let mut target_bucket_max = 0.0f64;
    let mut warnings = 0usize;
    let mut gate_decisions = Vec::new();

    for &(image_index, scene) in batch {
        let teacher_prob = match (teacher.as_ref(), cfg.uses_teacher()) {
            (Some(t), true) => Some(forward_prob_with(detector, t.params(), &scene.image)?),
            _ => None,
        };
        let ev = evaluate_scene(
            detector,
            &detector.params.clone(),
            scene,
            cfg,
            epoch,
            image_index,
            lambda_prop,
            alpha_t,
            teacher_prob.as_ref(),
            None,
        )?;
        let grads = ev.tape.backward(ev.total_node, 1.0, Some(ev.f_node));
        for (seg, &node) in detector.segments.iter().zip(&ev.param_nodes) {
            let g = grads.get(node);
            for (i, &gv) in g.iter().enumerate() {
                grad_sum[seg.offset + i] += gv;
            }
        }
        desired_sum += l2_norm(grads.watch_logit());
        target_bucket_max = target_bucket_max.max(l2_norm(grads.watch_target()));
        drift_sum += if lambda_prop != 0.0 {
            let drift = ev.tape.backward(ev.prop_node, lambda_prop, None);
            l2_norm(drift.get(ev.f_node))
        } else {
            0.0
        };
        comp_sum.seed += ev.comps.seed;
        comp_sum.prop += ev.comps.prop;
        comp_sum.bg += ev.comps.bg;
        comp_sum.sparse += ev.comps.sparse;
        comp_sum.cons += ev.comps.cons;
        comp_sum.ctr += ev.comps.ctr;
        warnings += usize::from(ev.empty_negatives);
        gate_decisions.extend(ev.gate_decisions);
    }

    let n = batch.len() as f64;
    for g in grad_sum.iter_mut() {
        *g /= n;
    }
    for (v, &g) in opt.velocity.iter_mut().zip(&grad_sum) {
        *v = cfg.momentum * *v + g;
    }
    for (p, &v) in detector.params.iter_mut().zip(&opt.velocity) {
        *p -= cfg.lr * v;
    }
    if let Some(t) = teacher.as_mut() {
        ema_update(t, &detector.params)?;
    }

    let comps = LossComponents {
        seed: comp_sum.seed / n,
        prop: comp_sum.prop / n,
        bg: comp_sum.bg / n,
        sparse: comp_sum.sparse / n,
        cons: comp_sum.cons / n,
        ctr: comp_sum.ctr / n,
    };
    let weights = LossWeights {
        lambda_prop,
        w_ctr: cfg.effective_w_ctr(),
        ..cfg.weights
    };
    let mut loss = composite_loss(&weights, &comps)?;
    loss.grad_desired_norm = desired_sum / n;
    loss.grad_drift_norm = drift_sum / n;
    Ok(StepOutcome {
        loss,
        target_path_grad_norm: target_bucket_max,
        empty_negative_warnings: warnings,
        gate_decisions,
    })
}

/// Foreground/background separation of the feature space: mean max-seed
/// cosine over foreground pixels minus the mean over the `n_bg` most
/// seed-like background pixels drawn from a random candidate pool. Positive
/// means the foreground is better aligned with the seeds than hard clutter.
pub fn margin_diagnostic(
    features: &FeatureMap,
    seeds: &PointSet,
    gt: &BinaryMask,
    n_bg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (h, w) = (features.height(), features.width());
    let normalized = l2_normalize_channels(features, EPS_NORM)?;
    let hw = h * w;
    let c = features.channels();
    // Normalized seed vectors; a degenerate seed is an error.
    let mut seed_vecs = Vec::with_capacity(seeds.len());
    for &(r, col) in seeds.points() {
        let v = normalized.pixel_vector(r, col);
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateSeed { row: r, col });
        }
        seed_vecs.push(v);
    }
    let max_cos = |idx: usize| -> f64 {
        let mut best = f64::NEG_INFINITY;
        for sv in &seed_vecs {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += normalized.data()[ch * hw + idx] * sv[ch];
            }
            best = best.max(dot.clamp(-1.0, 1.0));
        }
        best
    };
    let fg: Vec<usize> = (0..hw).filter(|&i| gt.data()[i] == 1).collect();
    let bg: Vec<usize> = (0..hw).filter(|&i| gt.data()[i] == 0).collect();
    if fg.is_empty() || bg.is_empty() {
        return Err(Error::InvalidInput(
            "margin diagnostic needs both foreground and background pixels".into(),
        ));
    }
    if n_bg == 0 {
        return Err(Error::InvalidParameter("n_bg must be positive".into()));
    }
    let fg_mean = fg.iter().map(|&i| max_cos(i)).sum::<f64>() / fg.len() as f64;
    // Uniform candidate pool, then the hardest n_bg by similarity.
    let pool_size = (4 * n_bg).min(bg.len());
    let mut pool = bg;
    for i in 0..pool_size {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(pool_size);
    let mut sims: Vec<f64> = pool.iter().map(|&i| max_cos(i)).collect();
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = n_bg.min(sims.len());
    let bg_mean = sims[..k].iter().sum::<f64>() / k as f64;
    Ok(fg_mean - bg_mean)
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    bytes[16..23].copy_from_slice(b"shuffle");
    ChaCha8Rng::from_seed(bytes)
}

/// Per-seed expansion diagnostics of the affinity construction.
///
/// Returns `(target_support_px, high_affinity_ratio)`:
/// - `target_support_px`: mean area of the 8-connected component of the
///   propagation target above half amplitude (`A > 0.5`) containing each
///   seed — how far the constructed supervision support extends;
/// - `high_affinity_ratio`: mean area of the seed's component of the
///   near-duplicate feature set (`a > 0.95`) over the seed's ground-truth
///   component area — the footprint of feature collapse around each seed.
///   Healthy features shed this set quickly as the cut tightens; collapsed
///   features keep it at the size of the pulled basin.
pub fn affinity_support_stats(
    detector: &ToyDetector,
    scene: &Scene,
    params: &AffinityParams,
) -> Result<(f64, f64)> {
    use crate::grid::{connected_components, Connectivity};
    let (features, _, _) = forward(detector, &scene.image)?;
    let bundle = crate::affinity::build_bundle(&features, &scene.image, &scene.points, params)?;
    let seed_component_area = |mask: &crate::grid::BinaryMask, r: usize, c: usize| -> usize {
        connected_components(mask, Connectivity::Eight)
            .iter()
            .find(|comp| comp.pixels.binary_search(&(r, c)).is_ok())
            .map(|comp| comp.area)
            .unwrap_or(0)
    };
    let target_support = bundle.target.threshold(0.5);
    let high_affinity = bundle.a.threshold(0.95);
    let gt_comps = connected_components(&scene.gt, Connectivity::Eight);
    let mut support_sum = 0.0;
    let mut ratio_sum = 0.0;
    for &(r, c) in scene.points.points() {
        support_sum += seed_component_area(&target_support, r, c) as f64;
        let high = seed_component_area(&high_affinity, r, c) as f64;
        let gt_area = gt_comps
            .iter()
            .find(|comp| comp.pixels.binary_search(&(r, c)).is_ok())
            .map(|comp| comp.area)
            .unwrap_or(1);
        ratio_sum += high / gt_area as f64;
    }
    let n = scene.points.len() as f64;
    Ok((support_sum / n, ratio_sum / n))
}

fn eval_on(
    detector: &ToyDetector,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(EvalSummary, Option<f64>, f64, f64)> {
    let mut probs = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    let mut support_sum = 0.0;
    let mut ratio_sum = 0.0;
    for &i in indices {
        let scene = &dataset.scenes[i];
        let (_, _, prob) = forward(detector, &scene.image)?;
        probs.push(prob);
        gts.push(scene.gt.clone());
        let (support, ratio) = affinity_support_stats(detector, scene, &cfg.affinity)?;
        support_sum += support;
        ratio_sum += ratio;
    }
    let summary = metrics::evaluate(&probs, &gts, &cfg.eval, None)?;
    let masks: Vec<_> = probs.iter().map(|p| p.threshold(cfg.eval.threshold)).collect();
    let matched_area = metrics::mean_matched_pred_area(&masks, &gts, cfg.eval.match_dist)?;
    let n = indices.len() as f64;
    Ok((summary, matched_area, support_sum / n, ratio_sum / n))
}

fn margin_on(
    detector: &ToyDetector,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let take = indices.len().min(8);
    let mut sum = 0.0;
    for (k, &i) in indices.iter().take(take).enumerate() {
        let scene = &dataset.scenes[i];
        let (features, _, _) = forward(detector, &scene.image)?;
        let mut rng = {
            let mut bytes = [0u8; 32];
            bytes[..8].copy_from_slice(&cfg.seed.to_le_bytes());
            bytes[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
            bytes[16..24].copy_from_slice(&(k as u64).to_le_bytes());
            bytes[24..30].copy_from_slice(b"margin");
            ChaCha8Rng::from_seed(bytes)
        };
        sum += margin_diagnostic(
            &features,
            &scene.points,
            &scene.gt,
            cfg.margin_bg_samples,
            &mut rng,
        )?;
    }
    Ok(sum / take as f64)
}

/// Runs a full experiment: seeded init, per-epoch training with scheduled
/// weights, validation metrics, margin traces, and trailing-window
/// checkpoints. On a numerical failure the detector state is dumped next to
/// the run artifacts when a dump directory is given.
pub fn run_experiment(
    cfg: &TrainConfig,
    dataset: &Dataset,
    dump_dir: Option<&Path>,
) -> Result<TrainStats> {
    cfg.validate()?;
    let mut detector = ToyDetector::init(cfg.detector, cfg.seed)?;
    let mut opt = SgdState::new(detector.param_count());
    let mut teacher = if cfg.uses_teacher() {
        Some(TeacherState::new(detector.params().to_vec(), cfg.ema_decay)?)
    } else {
        None
    };
    let mut stats = TrainStats::default();

    if cfg.epochs == 0 {
        let (summary, _, _, _) = eval_on(&detector, dataset, dataset.eval_indices(), cfg)?;
        stats.final_eval = Some(summary);
        stats.checkpoints.push(detector.to_checkpoint(0));
        return Ok(stats);
    }

    let ck_from = ((cfg.epochs as f64) * (1.0 - cfg.checkpoint_last_frac)).floor() as usize;
    let mut step_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = dataset.train_indices.to_vec();
        let mut rng = shuffle_rng(cfg.seed, epoch);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss_sum = LossBreakdown::default();
        let mut epoch_target_norm = 0.0f64;
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &Scene)> =
                chunk.iter().map(|&i| (i, &dataset.scenes[i])).collect();
            let outcome = train_step(&mut detector, &mut opt, &batch, &mut teacher, cfg, epoch)
                .map_err(|e| {
                    if let (Error::NumericalFailure { .. }, Some(dir)) = (&e, dump_dir) {
                        let _ = std::fs::create_dir_all(dir);
                        let _ = detector
                            .to_checkpoint(epoch)
                            .save(&dir.join(format!("state_dump_epoch{epoch}.json")));
                    }
                    e
                })?;
            stats.empty_negative_warnings += outcome.empty_negative_warnings;
            stats.gate_log.extend(outcome.gate_decisions);
            stats.steps.push(StepRecord {
                epoch,
                step: step_counter,
                loss: outcome.loss,
                lambda_prop: cfg.lambda_at(epoch),
                target_path_grad_norm: outcome.target_path_grad_norm,
            });
            for (acc, v) in [
                (&mut epoch_loss_sum.seed, outcome.loss.seed),
                (&mut epoch_loss_sum.prop, outcome.loss.prop),
                (&mut epoch_loss_sum.bg, outcome.loss.bg),
                (&mut epoch_loss_sum.sparse, outcome.loss.sparse),
                (&mut epoch_loss_sum.cons, outcome.loss.cons),
                (&mut epoch_loss_sum.ctr, outcome.loss.ctr),
                (&mut epoch_loss_sum.total, outcome.loss.total),
                (&mut epoch_loss_sum.grad_desired_norm, outcome.loss.grad_desired_norm),
                (&mut epoch_loss_sum.grad_drift_norm, outcome.loss.grad_drift_norm),
            ] {
                *acc += v;
            }
            epoch_target_norm = epoch_target_norm.max(outcome.target_path_grad_norm);
            steps_in_epoch += 1;
            step_counter += 1;
        }
        let n = steps_in_epoch as f64;
        let loss = LossBreakdown {
            seed: epoch_loss_sum.seed / n,
            prop: epoch_loss_sum.prop / n,
            bg: epoch_loss_sum.bg / n,
            sparse: epoch_loss_sum.sparse / n,
            cons: epoch_loss_sum.cons / n,
            ctr: epoch_loss_sum.ctr / n,
            total: epoch_loss_sum.total / n,
            grad_desired_norm: epoch_loss_sum.grad_desired_norm / n,
            grad_drift_norm: epoch_loss_sum.grad_drift_norm / n,
        };
        let (eval, matched_area, support_px, support_ratio) =
            eval_on(&detector, dataset, dataset.eval_indices(), cfg)?;
        let margin = margin_on(&detector, dataset, dataset.eval_indices(), cfg, epoch)?;
        stats.epochs.push(EpochRecord {
            epoch,
            lambda_prop: cfg.lambda_at(epoch),
            alpha_t: cfg.alpha_at(epoch),
            loss,
            target_path_grad_norm: epoch_target_norm,
            eval,
            margin,
            mean_matched_pred_area: matched_area,
            affinity_support_px: support_px,
            affinity_area_ratio: support_ratio,
        });
        if epoch >= ck_from {
            stats.checkpoints.push(detector.to_checkpoint(epoch));
        }
    }
    stats.final_eval = stats.epochs.last().map(|e| e.eval.clone());
    Ok(stats)
}

impl TrainStats {
    /// Per-step loss CSV: step, components, total, gradient norms, lambda.
    pub fn write_step_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "step,epoch,seed,prop,bg,sparse,cons,ctr,total,grad_desired_norm,grad_drift_norm,lambda_prop"
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.epoch,
                s.loss.seed,
                s.loss.prop,
                s.loss.bg,
                s.loss.sparse,
                s.loss.cons,
                s.loss.ctr,
                s.loss.total,
                s.loss.grad_desired_norm,
                s.loss.grad_drift_norm,
                s.lambda_prop
            )?;
        }
        Ok(())
    }

    /// Per-epoch trace CSV: schedules, loss aggregates, metrics, margin.
    pub fn write_epoch_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,lambda_prop,alpha_t,total,seed,prop,bg,sparse,cons,ctr,grad_desired_norm,grad_drift_norm,miou,niou,pd,fa,area_ratio,margin,mean_matched_pred_area,affinity_support_px,affinity_area_ratio"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lambda_prop,
                e.alpha_t,
                e.loss.total,
                e.loss.seed,
                e.loss.prop,
                e.loss.bg,
                e.loss.sparse,
                e.loss.cons,
                e.loss.ctr,
                e.loss.grad_desired_norm,
                e.loss.grad_drift_norm,
                e.eval.miou,
                e.eval.niou,
                e.eval.pd,
                e.eval.fa,
                opt(e.eval.area_ratio),
                e.margin,
                opt(e.mean_matched_pred_area),
                e.affinity_support_px,
                e.affinity_area_ratio
            )?;
        }
        Ok(())
    }

    /// Gate decision CSV: epoch, image, seed, chosen radius, all (Q, C).
    pub fn write_gate_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,image_index,seed_index,r_star,scores")?;
        for d in &self.gate_log {
            let scores: Vec<String> =
                d.scores.iter().map(|(q, c)| format!("{q}:{c}")).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                d.epoch,
                d.image_index,
                d.seed_index,
                d.r_star,
                scores.join(";")
            )?;
        }
        Ok(())
    }
}

/// Audit evaluation of the composite objective through the detector at a
/// parameter point: value, analytic parameter gradient, and the discrete
/// trace. The consistency target is frozen to the base point's target so the
/// probed function matches what the optimizer differentiates.
pub fn composite_audit_probe(
    detector: &ToyDetector,
    params: &[f64],
    scene: &Scene,
    cfg: &TrainConfig,
    lambda_prop: f64,
    frozen_cons_target: Option<&ScalarField>,
) -> Result<(AuditProbe, ScalarField)> {
    let ev = evaluate_scene(
        detector,
        params,
        scene,
        cfg,
        0,
        0,
        lambda_prop,
        0.0,
        None,
        frozen_cons_target,
    )?;
    let grads = ev.tape.backward(ev.total_node, 1.0, None);
    let mut grad = vec![0.0; params.len()];
    for (seg, &node) in detector.segments.iter().zip(&ev.param_nodes) {
        grad[seg.offset..seg.offset + seg.len].copy_from_slice(grads.get(node));
    }
    Ok((
        AuditProbe {
            value: ev.tape.scalar_value(ev.total_node),
            grad,
            discrete_state: ev.trace.value(),
        },
        ev.cons_target,
    ))
}

/// Per-step diagnostics of the gradient split for one scene without
/// mutating anything; used by stop-gradient assertions.
pub fn probe_gradient_split(
    detector: &ToyDetector,
    scene: &Scene,
    cfg: &TrainConfig,
    lambda_prop: f64,
) -> Result<(f64, f64, f64)> {
    let ev = evaluate_scene(
        detector,
        &detector.params.clone(),
        scene,
        cfg,
        0,
        0,
        lambda_prop,
        0.0,
        None,
        None,
    )?;
    let grads = ev.tape.backward(ev.total_node, 1.0, Some(ev.f_node));
    let desired = l2_norm(grads.watch_logit());
    let target_bucket = l2_norm(grads.watch_target());
    let drift = if lambda_prop != 0.0 {
        let d = ev.tape.backward(ev.prop_node, lambda_prop, None);
        l2_norm(d.get(ev.f_node))
    } else {
        0.0
    };
    Ok((desired, drift, target_bucket))
}
