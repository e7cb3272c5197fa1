//! The composite training objective: point BCE at seeds, the propagation
//! term, OHEM background suppression, affinity-mass sparsity, stop-gradient
//! consistency, and the negative-only hard-background contrast, plus a
//! central-difference gradient auditor.
//!
//! Gradients come from the same tape ops the training loop records, so the
//! standalone functions here and the taped training path cannot drift apart.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{PointSet, ScalarField};
use crate::tape::{PathTag, Tape};

/// Probability clamp inside logarithms.
pub const EPS_LOG: f64 = 1e-7;
/// Denominator guard of the propagation loss.
pub const EPS_PROP: f64 = 1e-6;

/// Weights of the composite objective. `lambda_prop` is the scheduled value
/// for the current epoch; `w_ctr` stays 0 unless the hard-background
/// contrast axis is enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_seed: f64,
    pub lambda_prop: f64,
    pub w_bg: f64,
    pub w_sparse: f64,
    pub w_cons: f64,
    pub w_ctr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_seed: 2.0, lambda_prop: 1.0, w_bg: 2.0, w_sparse: 1.0, w_cons: 1.0, w_ctr: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_seed", self.w_seed),
            ("lambda_prop", self.lambda_prop),
            ("w_bg", self.w_bg),
            ("w_sparse", self.w_sparse),
            ("w_cons", self.w_cons),
            ("w_ctr", self.w_ctr),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw values of the six component losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub seed: f64,
    pub prop: f64,
    pub bg: f64,
    pub sparse: f64,
    pub cons: f64,
    pub ctr: f64,
}

/// One step's loss record: components, total, and the two-term split of the
/// feature-map gradient (through the logit head vs. through the propagation
/// term's target-construction path).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub seed: f64,
    pub prop: f64,
    pub bg: f64,
    pub sparse: f64,
    pub cons: f64,
    pub ctr: f64,
    pub total: f64,
    pub grad_desired_norm: f64,
    pub grad_drift_norm: f64,
}

/// Assembles the weighted total; component values must be non-negative.
pub fn composite_loss(weights: &LossWeights, comps: &LossComponents) -> Result<LossBreakdown> {
    weights.validate()?;
    let named = [
        ("seed", comps.seed),
        ("prop", comps.prop),
        ("bg", comps.bg),
        ("sparse", comps.sparse),
        ("cons", comps.cons),
        ("ctr", comps.ctr),
    ];
    for (name, v) in named {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidInput(format!(
                "loss component {name} must be finite and >= 0, got {v}"
            )));
        }
    }
    let total = weights.w_seed * comps.seed
        + weights.lambda_prop * comps.prop
        + weights.w_bg * comps.bg
        + weights.w_sparse * comps.sparse
        + weights.w_cons * comps.cons
        + weights.w_ctr * comps.ctr;
    Ok(LossBreakdown {
        seed: comps.seed,
        prop: comps.prop,
        bg: comps.bg,
        sparse: comps.sparse,
        cons: comps.cons,
        ctr: comps.ctr,
        total,
        grad_desired_norm: 0.0,
        grad_drift_norm: 0.0,
    })
}

/// Online hard example mining configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Fraction of eligible background pixels to mine, in `(0, 1]`.
    pub k_frac: f64,
    /// Pixels within this Euclidean radius of any seed are excluded.
    pub exclusion_radius: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self { k_frac: 0.01, exclusion_radius: 6.0 }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "k_frac must be in (0, 1], got {}",
                self.k_frac
            )));
        }
        if self.exclusion_radius < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "exclusion_radius must be >= 0, got {}",
                self.exclusion_radius
            )));
        }
        Ok(())
    }
}

/// A scalar loss value together with its gradient over the probed input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean point-wise BCE at the annotated seeds: `mean_k -ln(p_k)`.
pub fn seed_loss(prob: &ScalarField, seeds: &PointSet) -> Result<LossGrad> {
    let idxs: Vec<usize> = seeds.points().iter().map(|&(r, c)| r * prob.width() + c).collect();
    let mut tape = Tape::new();
    let p = tape.leaf_field(prob.data().to_vec(), prob.height(), prob.width(), PathTag::Neutral);
    let loss = tape.seed_bce(p, idxs, EPS_LOG, PathTag::Neutral)?;
    let grads = tape.backward(loss, 1.0, None);
    Ok(LossGrad { value: tape.scalar_value(loss), grad: grads.get(p).to_vec() })
}

/// Propagation loss `sum w (1 - a)^2 / (sum w + eps)`; gradient through `a`.
pub fn propagation_loss(a: &ScalarField, w: &ScalarField) -> Result<LossGrad> {
    if !a.same_shape(w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", w.height(), w.width()),
        });
    }
    let mut tape = Tape::new();
    let an = tape.leaf_field(a.data().to_vec(), a.height(), a.width(), PathTag::Neutral);
    let loss = tape.prop_loss(an, w.data().to_vec(), EPS_PROP, PathTag::Neutral)?;
    let grads = tape.backward(loss, 1.0, None);
    Ok(LossGrad { value: tape.scalar_value(loss), grad: grads.get(an).to_vec() })
}

/// Selects the top-K highest-probability pixels outside the seed exclusion
/// disks. `K = ceil(k_frac * eligible_count)`. Returned in mining order
/// (probability descending, index ascending on ties).
pub fn mine_hard_background(
    prob: &ScalarField,
    seeds: &PointSet,
    cfg: &OhemConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let (h, w) = (prob.height(), prob.width());
    let r2 = cfg.exclusion_radius * cfg.exclusion_radius;
    let mut eligible: Vec<usize> = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let excluded = seeds.points().iter().any(|&(sr, sc)| {
                let dr = row as f64 - sr as f64;
                let dc = col as f64 - sc as f64;
                dr * dr + dc * dc <= r2
            });
            if !excluded {
                eligible.push(row * w + col);
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::ExclusionCoversImage);
    }
    let k = ((cfg.k_frac * eligible.len() as f64).ceil() as usize).max(1).min(eligible.len());
    eligible.sort_by(|&i, &j| {
        prob.data()[j]
            .partial_cmp(&prob.data()[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    eligible.truncate(k);
    Ok(eligible)
}

/// OHEM background suppression: mean `-ln(1 - p)` over the mined set, which
/// is also returned for the contrastive branch.
pub fn background_ohem_loss(
    prob: &ScalarField,
    seeds: &PointSet,
    cfg: &OhemConfig,
) -> Result<(LossGrad, Vec<usize>)> {
    let mined = mine_hard_background(prob, seeds, cfg)?;
    let mut tape = Tape::new();
    let p = tape.leaf_field(prob.data().to_vec(), prob.height(), prob.width(), PathTag::Neutral);
    let loss = tape.ohem_bce(p, mined.clone(), EPS_LOG, PathTag::Neutral)?;
    let grads = tape.backward(loss, 1.0, None);
    Ok((LossGrad { value: tape.scalar_value(loss), grad: grads.get(p).to_vec() }, mined))
}

/// Global affinity mass: mean of the target field.
pub fn sparsity_loss(a: &ScalarField) -> Result<LossGrad> {
    if a.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput("affinity values must lie in [0, 1]".into()));
    }
    let mut tape = Tape::new();
    let an = tape.leaf_field(a.data().to_vec(), a.height(), a.width(), PathTag::Neutral);
    let loss = tape.mean_field(an, PathTag::Neutral);
    let grads = tape.backward(loss, 1.0, None);
    Ok(LossGrad { value: tape.scalar_value(loss), grad: grads.get(an).to_vec() })
}

/// MSE between the prediction and a stop-gradient target. The target must
/// carry the detached marker; gradient flows through the prediction only.
pub fn consistency_loss(prob: &ScalarField, target: &ScalarField) -> Result<LossGrad> {
    if !target.is_detached() {
        return Err(Error::ContractViolation(
            "consistency target must be detached (stop-gradient) before use".into(),
        ));
    }
    if !prob.same_shape(target) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", prob.height(), prob.width()),
            got: format!("{}x{}", target.height(), target.width()),
        });
    }
    let mut tape = Tape::new();
    let p = tape.leaf_field(prob.data().to_vec(), prob.height(), prob.width(), PathTag::Neutral);
    let loss = tape.mse_const(p, target.data().to_vec(), PathTag::Neutral)?;
    let grads = tape.backward(loss, 1.0, None);
    Ok(LossGrad { value: tape.scalar_value(loss), grad: grads.get(p).to_vec() })
}

/// Contrastive loss output: value, gradient over the prototype, gradient
/// over each negative, and whether the negative set was empty.
#[derive(Debug, Clone)]
pub struct ContrastLoss {
    pub value: f64,
    pub grad_proto: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
    /// Set when the mined negative set was empty and the loss defaulted to 0.
    pub empty_negatives: bool,
}

fn check_unit_or_zero(name: &str, v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-6 && (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "{name} must be unit-norm (or zero), got norm {norm}"
        )));
    }
    Ok(())
}

/// Negative-only contrastive penalty
/// `mean_i [max(0, <z_p, z_i> - m_neg)]^2` over mined hard negatives.
pub fn contrastive_hard_bg_loss(
    z_p: &[f64],
    negatives: &[Vec<f64>],
    m_neg: f64,
) -> Result<ContrastLoss> {
    if !(0.0..1.0).contains(&m_neg) {
        return Err(Error::InvalidParameter(format!("m_neg must be in [0, 1), got {m_neg}")));
    }
    let norm = z_p.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "prototype must be unit-norm, got norm {norm}"
        )));
    }
    for (i, n) in negatives.iter().enumerate() {
        if n.len() != z_p.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", z_p.len()),
                got: format!("{} channels in negative {i}", n.len()),
            });
        }
        check_unit_or_zero(&format!("negative {i}"), n)?;
    }
    if negatives.is_empty() {
        return Ok(ContrastLoss {
            value: 0.0,
            grad_proto: vec![0.0; z_p.len()],
            grad_negatives: Vec::new(),
            empty_negatives: true,
        });
    }
    // Pack prototype and negatives as pixels of a 1-row stack; the tape's
    // contrast op then provides value and gradients.
    let c = z_p.len();
    let n = negatives.len();
    let mut stack = vec![0.0; c * (n + 1)];
    for ch in 0..c {
        stack[ch * (n + 1)] = z_p[ch];
        for (k, neg) in negatives.iter().enumerate() {
            stack[ch * (n + 1) + 1 + k] = neg[ch];
        }
    }
    let mut tape = Tape::new();
    let s = tape.leaf_stack(stack, c, 1, n + 1, PathTag::Neutral);
    let loss = tape.contrast(s, vec![0], (1..=n).collect(), m_neg, PathTag::Neutral)?;
    let grads = tape.backward(loss, 1.0, None);
    let g = grads.get(s);
    let grad_proto: Vec<f64> = (0..c).map(|ch| g[ch * (n + 1)]).collect();
    let grad_negatives: Vec<Vec<f64>> =
        (0..n).map(|k| (0..c).map(|ch| g[ch * (n + 1) + 1 + k]).collect()).collect();
    Ok(ContrastLoss {
        value: tape.scalar_value(loss),
        grad_proto,
        grad_negatives,
        empty_negatives: false,
    })
}

/// Rolling hash of the discrete choices (argmaxes, mined sets, margin
/// supports) made during a loss evaluation. The gradient auditor compares it
/// across perturbed evaluations to detect kink crossings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteTrace(u64);

impl Default for DiscreteTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl DiscreteTrace {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn push(&mut self, x: u64) {
        self.0 ^= x;
        self.0 = self.0.wrapping_mul(0x100_0000_01b3);
    }

    pub fn push_usizes(&mut self, xs: &[usize]) {
        self.push(xs.len() as u64);
        for &x in xs {
            self.push(x as u64);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// One evaluation of an audited loss: value, analytic gradient over the
/// probed parameters, and the discrete-state hash.
#[derive(Debug, Clone)]
pub struct AuditProbe {
    pub value: f64,
    pub grad: Vec<f64>,
    pub discrete_state: u64,
}

/// Central-difference gradient audit.
///
/// Probes `coords` (all coordinates when empty) of `params` with step `step`
/// and returns the max relative error between the analytic gradient and the
/// central difference. Evaluations whose discrete state differs from the
/// base point sit on a selection tie; the probe point is then jittered and
/// retried, failing after 10 attempts.
pub fn finite_difference_audit<F>(
    mut eval: F,
    params: &[f64],
    step: f64,
    coords: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<AuditProbe>,
{
    if step <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let all_coords: Vec<usize>;
    let coords = if coords.is_empty() {
        all_coords = (0..params.len()).collect();
        &all_coords
    } else {
        coords
    };
    'attempt: for attempt in 0..10 {
        let mut point = params.to_vec();
        if attempt > 0 {
            let scale = 1e-3 * attempt as f64;
            for v in point.iter_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
        let base = eval(&point)?;
        let mut max_rel = 0.0f64;
        for &c in coords {
            let orig = point[c];
            point[c] = orig + step;
            let plus = eval(&point)?;
            point[c] = orig - step;
            let minus = eval(&point)?;
            point[c] = orig;
            if plus.discrete_state != base.discrete_state
                || minus.discrete_state != base.discrete_state
            {
                continue 'attempt;
            }
            let fd = (plus.value - minus.value) / (2.0 * step);
            let analytic = base.grad[c];
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((fd - analytic).abs() / denom);
        }
        return Ok(max_rel);
    }
    Err(Error::AuditFailed(
        "probe landed on a non-differentiable tie in all 10 jittered attempts".into(),
    ))
}
