//! The three stabilizer axes: local teacher decoupling (EMA + PredMix +
//! propagation-weight decay), hard-background contrast wiring lives with the
//! losses, and the adaptive support gate that restricts prior geometry.

use crate::affinity::WinnerField;
use crate::error::{Error, Result};
use crate::grid::{PointSet, ScalarField};

/// EMA mirror of the detector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    params: Vec<f64>,
    decay: f64,
    step_count: u64,
}

impl TeacherState {
    pub fn new(params: Vec<f64>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidParameter(format!(
                "EMA decay must be in [0, 1), got {decay}"
            )));
        }
        Ok(Self { params, decay, step_count: 0 })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One EMA step: `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut TeacherState, student: &[f64]) -> Result<()> {
    if teacher.params.len() != student.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", teacher.params.len()),
            got: format!("{}", student.len()),
        });
    }
    let d = teacher.decay;
    for (t, &s) in teacher.params.iter_mut().zip(student) {
        *t = d * *t + (1.0 - d) * s;
    }
    teacher.step_count += 1;
    Ok(())
}

/// Schedule of the PredMix blend factor and its seed-disk geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSchedule {
    pub alpha_max: f64,
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub disk_radius: f64,
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self { alpha_max: 0.5, ramp_start: 0, ramp_end: 1, disk_radius: 6.0 }
    }
}

impl MixSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return Err(Error::InvalidParameter(format!(
                "alpha_max must be in [0, 1], got {}",
                self.alpha_max
            )));
        }
        if self.ramp_start >= self.ramp_end {
            return Err(Error::InvalidParameter(format!(
                "ramp_start {} must precede ramp_end {}",
                self.ramp_start, self.ramp_end
            )));
        }
        Ok(())
    }

    /// Linear ramp from 0 at `ramp_start` to `alpha_max` at `ramp_end`.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch <= self.ramp_start {
            0.0
        } else if epoch >= self.ramp_end {
            self.alpha_max
        } else {
            self.alpha_max * (epoch - self.ramp_start) as f64
                / (self.ramp_end - self.ramp_start) as f64
        }
    }
}

/// Cosine decay schedule of the propagation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropDecaySchedule {
    pub lambda0: f64,
    pub decay_start: usize,
    pub total_epochs: usize,
    pub floor: f64,
}

impl PropDecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.floor < 0.0 || self.lambda0 < self.floor {
            return Err(Error::InvalidParameter(format!(
                "need lambda0 >= floor >= 0, got lambda0 {} floor {}",
                self.lambda0, self.floor
            )));
        }
        if self.decay_start >= self.total_epochs {
            return Err(Error::InvalidParameter(format!(
                "decay_start {} must precede total_epochs {}",
                self.decay_start, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// `lambda0` before `decay_start`, then a smooth cosine glide to `floor`
/// reached at the final epoch.
pub fn lambda_prop_at(schedule: &PropDecaySchedule, epoch: usize) -> f64 {
    if epoch < schedule.decay_start {
        return schedule.lambda0;
    }
    let span = (schedule.total_epochs - 1).saturating_sub(schedule.decay_start).max(1);
    let progress = ((epoch - schedule.decay_start) as f64 / span as f64).min(1.0);
    schedule.floor
        + (schedule.lambda0 - schedule.floor)
            * 0.5
            * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Locally blends the stop-gradient target with the teacher probability
/// inside seed-centered disks; outside the disks the target passes through
/// bit-exactly. The input target must already carry the stop-gradient
/// marker and the output keeps it.
pub fn predmix_target(
    target: &ScalarField,
    teacher_prob: &ScalarField,
    seeds: &PointSet,
    alpha_t: f64,
    disk_radius: f64,
) -> Result<ScalarField> {
    if !target.is_detached() {
        return Err(Error::ContractViolation(
            "predmix input target must be detached (stop-gradient)".into(),
        ));
    }
    if !target.same_shape(teacher_prob) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", target.height(), target.width()),
            got: format!("{}x{}", teacher_prob.height(), teacher_prob.width()),
        });
    }
    if !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::InvalidParameter(format!("alpha_t must be in [0, 1], got {alpha_t}")));
    }
    let (h, w) = (target.height(), target.width());
    let r2 = disk_radius * disk_radius;
    let mut out = target.data().to_vec();
    for row in 0..h {
        for col in 0..w {
            let inside = seeds.points().iter().any(|&(sr, sc)| {
                let dr = row as f64 - sr as f64;
                let dc = col as f64 - sc as f64;
                dr * dr + dc * dc <= r2
            });
            if inside {
                let idx = row * w + col;
                out[idx] =
                    (1.0 - alpha_t) * target.data()[idx] + alpha_t * teacher_prob.data()[idx];
            }
        }
    }
    Ok(ScalarField::new(h, w, out)?.detach())
}

/// Support quality and reliability of a radius-`r` disk around a seed:
/// `Q_r` is the mean target inside the disk minus the mean on the `(r, 2r]`
/// ring; `C_r` is the fraction of ring pixels with target below 0.1.
/// An empty (fully clipped) ring scores `C_r = 0`.
pub fn support_scores(target: &ScalarField, seed: (usize, usize), r: usize) -> Result<(f64, f64)> {
    if r < 1 {
        return Err(Error::InvalidParameter("gate radius must be >= 1".into()));
    }
    let (h, w) = (target.height(), target.width());
    let (sr, sc) = (seed.0 as f64, seed.1 as f64);
    let r_f = r as f64;
    let (mut in_sum, mut in_count) = (0.0, 0usize);
    let (mut ring_sum, mut ring_count, mut ring_low) = (0.0, 0usize, 0usize);
    let reach = (2 * r) as isize;
    let r0 = (seed.0 as isize - reach).max(0) as usize;
    let r1 = ((seed.0 as isize + reach) as usize).min(h - 1);
    let c0 = (seed.1 as isize - reach).max(0) as usize;
    let c1 = ((seed.1 as isize + reach) as usize).min(w - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let dr = row as f64 - sr;
            let dc = col as f64 - sc;
            let dist = (dr * dr + dc * dc).sqrt();
            let v = target.get(row, col);
            if dist <= r_f {
                in_sum += v;
                in_count += 1;
            } else if dist <= 2.0 * r_f {
                ring_sum += v;
                ring_count += 1;
                if v < 0.1 {
                    ring_low += 1;
                }
            }
        }
    }
    let inside_mean = in_sum / in_count as f64;
    let (ring_mean, reliability) = if ring_count == 0 {
        (0.0, 0.0)
    } else {
        (ring_sum / ring_count as f64, ring_low as f64 / ring_count as f64)
    };
    Ok((inside_mean - ring_mean, reliability))
}

/// Candidate radii with per-radius reliability thresholds; thresholds are
/// non-decreasing so larger supports need stricter evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub radii: Vec<usize>,
    pub tau: Vec<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { radii: vec![2, 4, 6, 8, 12], tau: vec![0.5, 0.6, 0.7, 0.8, 0.9] }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.len() != self.tau.len() {
            return Err(Error::InvalidParameter(
                "gate radii and tau must be non-empty and aligned".into(),
            ));
        }
        if self.radii.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidParameter("gate radii must be strictly ascending".into()));
        }
        if self.tau.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::InvalidParameter("gate thresholds must be non-decreasing".into()));
        }
        if self.radii[0] < 1 {
            return Err(Error::InvalidParameter("gate radii must be >= 1".into()));
        }
        Ok(())
    }

    /// The most conservative radius, returned when no radius is feasible.
    pub fn fallback_radius(&self) -> usize {
        self.radii[0]
    }

    /// Same radii with thresholds disabled (every radius feasible); the
    /// free-radius failure configuration.
    pub fn with_thresholds_disabled(&self) -> Self {
        Self { radii: self.radii.clone(), tau: vec![-1.0; self.radii.len()] }
    }
}

/// Constrained argmax over radii: the best `Q_r` among radii whose `C_r`
/// clears the threshold, ties toward the smaller radius; the fallback
/// radius when nothing is feasible.
pub fn adaptive_support_gate(scores: &[(f64, f64)], cfg: &GateConfig) -> Result<usize> {
    cfg.validate()?;
    if scores.len() != cfg.radii.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} radius scores", cfg.radii.len()),
            got: format!("{}", scores.len()),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for (k, &(q, c)) in scores.iter().enumerate() {
        if c >= cfg.tau[k] {
            let better = match best {
                None => true,
                Some((bq, _)) => q > bq,
            };
            if better {
                best = Some((q, cfg.radii[k]));
            }
        }
    }
    Ok(best.map(|(_, r)| r).unwrap_or_else(|| cfg.fallback_radius()))
}

/// Zeroes the prior outside each pixel's winner-seed disk of radius
/// `r_star[winner]`; inside the disk the prior is untouched.
pub fn apply_gate_to_prior(
    prior: &ScalarField,
    winner: &WinnerField,
    seeds: &PointSet,
    r_star: &[usize],
) -> Result<ScalarField> {
    if r_star.len() != seeds.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gate radii", seeds.len()),
            got: format!("{}", r_star.len()),
        });
    }
    let (h, w) = (prior.height(), prior.width());
    let mut out = prior.data().to_vec();
    for row in 0..h {
        for col in 0..w {
            let k = winner.get(row, col);
            let (sr, sc) = seeds.points()[k];
            let dr = row as f64 - sr as f64;
            let dc = col as f64 - sc as f64;
            let r = r_star[k] as f64;
            if dr * dr + dc * dc > r * r {
                out[row * w + col] = 0.0;
            }
        }
    }
    ScalarField::new(h, w, out)
}
