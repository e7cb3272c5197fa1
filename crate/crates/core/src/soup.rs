//! Checkpoint persistence and late-plateau parameter combination: equal
//! averaging, greedy two-checkpoint averaging, and sweep-aware interpolation
//! between two checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub values: Vec<f64>,
}

/// A saved parameter state. The content hash covers the exact parameter
/// bytes, so a round-tripped checkpoint is verifiably bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub segments: Vec<Segment>,
    pub hash: String,
}

impl Checkpoint {
    pub fn new(epoch: usize, segments: Vec<Segment>) -> Self {
        let hash = content_hash(&segments);
        Self { version: CHECKPOINT_VERSION, epoch, segments, hash }
    }

    /// Flattens segments back into one parameter vector, in segment order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        let want = content_hash(&ck.segments);
        if want != ck.hash {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint hash mismatch: recorded {}, actual {want}", ck.hash),
            });
        }
        Ok(ck)
    }
}

fn content_hash(segments: &[Segment]) -> String {
    let mut hasher = Sha256::new();
    for seg in segments {
        hasher.update(seg.name.as_bytes());
        hasher.update([0u8]);
        for v in &seg.values {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Checks that all inputs carry identical segment names and lengths,
/// reporting every offending segment.
fn check_compatible(cks: &[Checkpoint]) -> Result<()> {
    let first = &cks[0];
    for ck in &cks[1..] {
        let mut offending = Vec::new();
        if ck.segments.len() != first.segments.len() {
            offending.push(format!(
                "segment count {} vs {}",
                ck.segments.len(),
                first.segments.len()
            ));
        } else {
            for (a, b) in first.segments.iter().zip(&ck.segments) {
                if a.name != b.name || a.values.len() != b.values.len() {
                    offending.push(format!(
                        "{} ({} values) vs {} ({} values)",
                        a.name,
                        a.values.len(),
                        b.name,
                        b.values.len()
                    ));
                }
            }
        }
        if !offending.is_empty() {
            return Err(Error::IncompatibleCheckpoints(offending.join(", ")));
        }
    }
    Ok(())
}

/// Elementwise arithmetic mean of all checkpoints' parameters. The result's
/// epoch is the latest input epoch.
pub fn equal_average(cks: &[Checkpoint]) -> Result<Checkpoint> {
    if cks.is_empty() {
        return Err(Error::InvalidInput("equal_average needs at least one checkpoint".into()));
    }
    check_compatible(cks)?;
    let n = cks.len() as f64;
    let segments = cks[0]
        .segments
        .iter()
        .enumerate()
        .map(|(si, seg)| Segment {
            name: seg.name.clone(),
            values: (0..seg.values.len())
                .map(|vi| cks.iter().map(|ck| ck.segments[si].values[vi]).sum::<f64>() / n)
                .collect(),
        })
        .collect();
    let epoch = cks.iter().map(|ck| ck.epoch).max().unwrap();
    Ok(Checkpoint::new(epoch, segments))
}

/// Provenance of a soup decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupChoice {
    pub rule: String,
    /// Input hashes in the order considered.
    pub input_hashes: Vec<String>,
    /// Chosen pair indices (greedy) when applicable.
    pub chosen_pair: Option<(usize, usize)>,
    /// Chosen interpolation coefficient when applicable.
    pub chosen_alpha: Option<f64>,
    pub score: f64,
}

/// Evaluates the equal average of every checkpoint pair and returns the best
/// scorer. Pairs are visited in ascending `(epoch_i, epoch_j)` order and only
/// a strictly better score replaces the incumbent, so ties resolve toward
/// earlier epochs.
pub fn greedy_pair_average<F>(cks: &[Checkpoint], mut eval: F) -> Result<(Checkpoint, SoupChoice)>
where
    F: FnMut(&Checkpoint) -> Result<f64>,
{
    if cks.len() < 2 {
        return Err(Error::InvalidInput("greedy averaging needs at least two checkpoints".into()));
    }
    check_compatible(cks)?;
    let mut order: Vec<(usize, usize)> = Vec::new();
    for i in 0..cks.len() {
        for j in i + 1..cks.len() {
            order.push((i, j));
        }
    }
    order.sort_by_key(|&(i, j)| {
        let (ei, ej) = (cks[i].epoch.min(cks[j].epoch), cks[i].epoch.max(cks[j].epoch));
        (ei, ej, i, j)
    });
    let mut best: Option<(f64, (usize, usize), Checkpoint)> = None;
    for (i, j) in order {
        let avg = equal_average(&[cks[i].clone(), cks[j].clone()])?;
        let score = eval(&avg)?;
        let better = match &best {
            None => true,
            Some((bs, _, _)) => score > *bs,
        };
        if better {
            best = Some((score, (i, j), avg));
        }
    }
    let (score, pair, ck) = best.unwrap();
    let choice = SoupChoice {
        rule: "greedy_pair".into(),
        input_hashes: cks.iter().map(|c| c.hash.clone()).collect(),
        chosen_pair: Some(pair),
        chosen_alpha: None,
        score,
    };
    Ok((ck, choice))
}

/// Evaluates `(1 - alpha) * a + alpha * b` across an alpha grid that must
/// include both endpoints; the endpoints reproduce `a` and `b` bit-exactly.
/// Ties resolve toward the smaller alpha.
pub fn sweep_interpolate<F>(
    a: &Checkpoint,
    b: &Checkpoint,
    alphas: &[f64],
    mut eval: F,
) -> Result<(Checkpoint, SoupChoice)>
where
    F: FnMut(&Checkpoint) -> Result<f64>,
{
    check_compatible(&[a.clone(), b.clone()])?;
    if !alphas.contains(&0.0) || !alphas.contains(&1.0) {
        return Err(Error::InvalidParameter("alpha grid must include 0 and 1".into()));
    }
    if alphas.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidParameter("alphas must lie in [0, 1]".into()));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sorted.dedup();
    let blend = |alpha: f64| -> Checkpoint {
        if alpha == 0.0 {
            return a.clone();
        }
        if alpha == 1.0 {
            return b.clone();
        }
        let segments = a
            .segments
            .iter()
            .zip(&b.segments)
            .map(|(sa, sb)| Segment {
                name: sa.name.clone(),
                values: sa
                    .values
                    .iter()
                    .zip(&sb.values)
                    .map(|(&va, &vb)| (1.0 - alpha) * va + alpha * vb)
                    .collect(),
            })
            .collect();
        Checkpoint::new(a.epoch.max(b.epoch), segments)
    };
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    for &alpha in &sorted {
        let ck = blend(alpha);
        let score = eval(&ck)?;
        let better = match &best {
            None => true,
            Some((bs, _, _)) => score > *bs,
        };
        if better {
            best = Some((score, alpha, ck));
        }
    }
    let (score, alpha, ck) = best.unwrap();
    let choice = SoupChoice {
        rule: "sweep_interpolate".into(),
        input_hashes: vec![a.hash.clone(), b.hash.clone()],
        chosen_pair: None,
        chosen_alpha: Some(alpha),
        score,
    };
    Ok((ck, choice))
}
