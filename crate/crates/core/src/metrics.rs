//! Detection metrics: global and per-sample IoU, centroid-matched detection
//! probability, false-alarm rate, area ratio, size stratification, and
//! threshold sweeps.

use crate::error::{Error, Result};
use crate::grid::{connected_components, BinaryMask, Component, Connectivity, ScalarField};

/// How false-alarm pixels are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaVariant {
    /// Pixels of predicted components not matched to any ground-truth
    /// component (matched components contribute nothing, however large).
    UnmatchedComponents,
    /// Every predicted pixel outside the ground truth.
    AllPixels,
}

/// Evaluation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Binarization threshold on probabilities.
    pub threshold: f64,
    /// Centroid match distance in pixels.
    pub match_dist: f64,
    /// Size bin edges (inclusive upper bounds of tiny/small/medium).
    pub bin_edges: [usize; 3],
    pub connectivity: Connectivity,
    pub fa_variant: FaVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.55,
            match_dist: 3.0,
            bin_edges: [10, 30, 80],
            connectivity: Connectivity::Eight,
            fa_variant: FaVariant::UnmatchedComponents,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.match_dist < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "match distance must be >= 0, got {}",
                self.match_dist
            )));
        }
        if self.bin_edges.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidParameter("bin edges must be ascending".into()));
        }
        Ok(())
    }
}

/// Size bins over ground-truth component area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBin {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 4] = [SizeBin::Tiny, SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    pub fn from_area(area: usize, edges: &[usize; 3]) -> Self {
        if area <= edges[0] {
            SizeBin::Tiny
        } else if area <= edges[1] {
            SizeBin::Small
        } else if area <= edges[2] {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeBin::Tiny => "tiny",
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

/// Greedy nearest-first one-to-one matching of predicted to ground-truth
/// components by centroid distance. Returns `(pred_idx, gt_idx)` pairs.
pub fn match_components(
    preds: &[Component],
    gts: &[Component],
    match_dist: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        for (pi, pred) in preds.iter().enumerate() {
            let dr = pred.centroid.0 - gt.centroid.0;
            let dc = pred.centroid.1 - gt.centroid.1;
            let dist = (dr * dr + dc * dc).sqrt();
            if dist <= match_dist {
                candidates.push((dist, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut pred_taken = vec![false; preds.len()];
    let mut matches = Vec::new();
    for (_, gi, pi) in candidates {
        if !gt_taken[gi] && !pred_taken[pi] {
            gt_taken[gi] = true;
            pred_taken[pi] = true;
            matches.push((pi, gi));
        }
    }
    matches
}

fn check_aligned(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} masks", gts.len()),
            got: format!("{}", preds.len()),
        });
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", g.height(), g.width()),
                got: format!("{}x{}", p.height(), p.width()),
            });
        }
    }
    Ok(())
}

fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    (inter, union)
}

/// Global IoU: total intersection over total union across the whole set.
/// An empty union counts as 1 when both sides are empty, 0 otherwise.
pub fn miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = intersection_union(p, g);
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Sample-mean IoU: mean over images of per-image IoU.
pub fn niou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    check_aligned(preds, gts)?;
    if preds.is_empty() {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = intersection_union(p, g);
        sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    Ok(sum / preds.len() as f64)
}

/// Centroid-matched probability of detection: detected ground-truth
/// components over all ground-truth components, across the set.
pub fn pd(preds: &[BinaryMask], gts: &[BinaryMask], match_dist: f64) -> Result<f64> {
    check_aligned(preds, gts)?;
    let mut detected = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let pc = connected_components(p, Connectivity::Eight);
        let gc = connected_components(g, Connectivity::Eight);
        total += gc.len();
        detected += match_components(&pc, &gc, match_dist).len();
    }
    Ok(if total == 0 { 1.0 } else { detected as f64 / total as f64 })
}

/// False-alarm rate: unmatched predicted pixels per total pixels, times 1e6.
pub fn fa(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    match_dist: f64,
    variant: FaVariant,
) -> Result<f64> {
    check_aligned(preds, gts)?;
    let mut false_pixels = 0usize;
    let mut total_pixels = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        total_pixels += p.height() * p.width();
        match variant {
            FaVariant::UnmatchedComponents => {
                let pc = connected_components(p, Connectivity::Eight);
                let gc = connected_components(g, Connectivity::Eight);
                let matches = match_components(&pc, &gc, match_dist);
                let matched: Vec<bool> = {
                    let mut v = vec![false; pc.len()];
                    for &(pi, _) in &matches {
                        v[pi] = true;
                    }
                    v
                };
                for (pi, comp) in pc.iter().enumerate() {
                    if !matched[pi] {
                        false_pixels += comp.area;
                    }
                }
            }
            FaVariant::AllPixels => {
                for (&pv, &gv) in p.data().iter().zip(g.data()) {
                    false_pixels += usize::from(pv == 1 && gv == 0);
                }
            }
        }
    }
    if total_pixels == 0 {
        return Ok(0.0);
    }
    Ok(false_pixels as f64 / total_pixels as f64 * 1e6)
}

/// Mean over matched component pairs of predicted area over ground-truth
/// area. `None` when nothing matched.
pub fn area_ratio(preds: &[BinaryMask], gts: &[BinaryMask], match_dist: f64) -> Result<Option<f64>> {
    check_aligned(preds, gts)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let pc = connected_components(p, Connectivity::Eight);
        let gc = connected_components(g, Connectivity::Eight);
        for (pi, gi) in match_components(&pc, &gc, match_dist) {
            sum += pc[pi].area as f64 / gc[gi].area as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

/// Mean area of predicted components matched to a ground-truth component;
/// `None` when nothing matched. Reports how far the predicted support has
/// expanded per detected target.
pub fn mean_matched_pred_area(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    match_dist: f64,
) -> Result<Option<f64>> {
    check_aligned(preds, gts)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let pc = connected_components(p, Connectivity::Eight);
        let gc = connected_components(g, Connectivity::Eight);
        for (pi, _) in match_components(&pc, &gc, match_dist) {
            sum += pc[pi].area as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

/// One stratification row.
#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub bin: SizeBin,
    pub count: usize,
    pub iou: Option<f64>,
    pub area_ratio: Option<f64>,
    pub pd: Option<f64>,
}

/// Buckets ground-truth components by area and reports per-bin IoU
/// (component-level, unmatched ground truth counts as pure union), area
/// ratio over matched pairs, and detection probability.
pub fn stratify(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    cfg: &EvalConfig,
) -> Result<Vec<BinRow>> {
    check_aligned(preds, gts)?;
    cfg.validate()?;
    #[derive(Default)]
    struct Acc {
        count: usize,
        matched: usize,
        inter: usize,
        union: usize,
        ratio_sum: f64,
    }
    let mut accs = [Acc::default(), Acc::default(), Acc::default(), Acc::default()];
    let bin_index = |b: SizeBin| SizeBin::ALL.iter().position(|&x| x == b).unwrap();
    for (p, g) in preds.iter().zip(gts) {
        let pc = connected_components(p, cfg.connectivity);
        let gc = connected_components(g, cfg.connectivity);
        let matches = match_components(&pc, &gc, cfg.match_dist);
        let mut match_of_gt: Vec<Option<usize>> = vec![None; gc.len()];
        for &(pi, gi) in &matches {
            match_of_gt[gi] = Some(pi);
        }
        for (gi, gt_comp) in gc.iter().enumerate() {
            let bin = SizeBin::from_area(gt_comp.area, &cfg.bin_edges);
            let acc = &mut accs[bin_index(bin)];
            acc.count += 1;
            match match_of_gt[gi] {
                Some(pi) => {
                    acc.matched += 1;
                    let pred_set: std::collections::BTreeSet<_> =
                        pc[pi].pixels.iter().collect();
                    let gt_set: std::collections::BTreeSet<_> =
                        gt_comp.pixels.iter().collect();
                    let inter = pred_set.intersection(&gt_set).count();
                    acc.inter += inter;
                    acc.union += pred_set.len() + gt_set.len() - inter;
                    acc.ratio_sum += pc[pi].area as f64 / gt_comp.area as f64;
                }
                None => {
                    acc.union += gt_comp.area;
                }
            }
        }
    }
    Ok(SizeBin::ALL
        .iter()
        .zip(accs.iter())
        .map(|(&bin, acc)| BinRow {
            bin,
            count: acc.count,
            iou: (acc.union > 0).then(|| acc.inter as f64 / acc.union as f64),
            area_ratio: (acc.matched > 0).then(|| acc.ratio_sum / acc.matched as f64),
            pd: (acc.count > 0).then(|| acc.matched as f64 / acc.count as f64),
        })
        .collect())
}

/// Evaluates global IoU at each threshold; returns the best `(threshold,
/// miou)` pair with ties toward the lower threshold.
pub fn threshold_sweep(
    probs: &[ScalarField],
    gts: &[BinaryMask],
    thresholds: &[f64],
) -> Result<(f64, f64)> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
        return Err(Error::InvalidParameter("thresholds must be in (0, 1)".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &t in &sorted {
        let masks: Vec<BinaryMask> = probs.iter().map(|p| p.threshold(t)).collect();
        let score = miou(&masks, gts)?;
        let better = match best {
            None => true,
            Some((_, bs)) => score > bs,
        };
        if better {
            best = Some((t, score));
        }
    }
    Ok(best.unwrap())
}

/// Full evaluation summary at one threshold plus an optional sweep result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub miou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub area_ratio: Option<f64>,
    pub best_threshold: Option<f64>,
    pub best_miou: Option<f64>,
}

/// Evaluates probability fields against ground truth at `cfg.threshold`.
pub fn evaluate(
    probs: &[ScalarField],
    gts: &[BinaryMask],
    cfg: &EvalConfig,
    sweep: Option<&[f64]>,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let masks: Vec<BinaryMask> = probs.iter().map(|p| p.threshold(cfg.threshold)).collect();
    let (best_threshold, best_miou) = match sweep {
        Some(grid) => {
            let (t, m) = threshold_sweep(probs, gts, grid)?;
            (Some(t), Some(m))
        }
        None => (None, None),
    };
    Ok(EvalSummary {
        miou: miou(&masks, gts)?,
        niou: niou(&masks, gts)?,
        pd: pd(&masks, gts, cfg.match_dist)?,
        fa: fa(&masks, gts, cfg.match_dist, cfg.fa_variant)?,
        area_ratio: area_ratio(&masks, gts, cfg.match_dist)?,
        best_threshold,
        best_miou,
    })
}
