//! In-batch propagation target construction: max-seed cosine similarity,
//! hard-margin sharpening, a local spatial/intensity prior, and their product.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{
    cosine_field, l2_normalize_channels, FeatureMap, Image, PointSet, ScalarField, EPS_NORM,
};

/// Which seed anchors a pixel's sharpened affinity and prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WinnerRule {
    /// Winner is the seed with maximal raw cosine similarity (default).
    ArgmaxCosine,
    /// Winner is the seed maximizing sharpened-affinity times prior.
    MaxProduct,
}

/// Parameters of the sharpening margin and the local prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityParams {
    /// Similarity cutoff in `[0, 1)` below which affinity is zeroed.
    pub m_hard: f64,
    /// Spatial bandwidth of the prior, pixels.
    pub sigma_s: f64,
    /// Intensity bandwidth of the prior, intensity units on `[0, 1]`.
    pub sigma_c: f64,
    pub winner_rule: WinnerRule,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self { m_hard: 0.7, sigma_s: 4.0, sigma_c: 0.15, winner_rule: WinnerRule::ArgmaxCosine }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m_hard) {
            return Err(Error::InvalidParameter(format!(
                "m_hard must be in [0, 1), got {}",
                self.m_hard
            )));
        }
        if self.sigma_s <= 0.0 || self.sigma_c <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma_s and sigma_c must be positive, got {} and {}",
                self.sigma_s, self.sigma_c
            )));
        }
        Ok(())
    }
}

/// Per-pixel index of the seed that won the similarity max.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WinnerField {
    height: usize,
    width: usize,
    data: Vec<usize>,
}

impl WinnerField {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// The supervision target and its intermediate fields, plus provenance.
#[derive(Debug, Clone)]
pub struct AffinityBundle {
    /// Raw max cosine similarity per pixel.
    pub s: ScalarField,
    /// Hard-margin sharpened affinity.
    pub a: ScalarField,
    /// Local spatial/intensity prior against the winner seed.
    pub w: ScalarField,
    /// Propagation target `A = a * w`.
    pub target: ScalarField,
    /// Which seed won the max at each pixel.
    pub winner: WinnerField,
}

/// Per-pixel max cosine similarity over seeds, with the argmax seed recorded.
/// Ties break toward the lowest seed index; each seed pixel scores exactly 1.
pub fn seed_similarity(f: &FeatureMap, seeds: &PointSet) -> Result<(ScalarField, WinnerField)> {
    if seeds.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let per_seed = per_seed_cosines(f, seeds)?;
    let (h, w) = (f.height(), f.width());
    let mut s = vec![f64::NEG_INFINITY; h * w];
    let mut winner = vec![0usize; h * w];
    for (k, field) in per_seed.iter().enumerate() {
        for (idx, &v) in field.data().iter().enumerate() {
            if v > s[idx] {
                s[idx] = v;
                winner[idx] = k;
            }
        }
    }
    Ok((ScalarField::new(h, w, s)?, WinnerField::new(h, w, winner)))
}

/// Cosine field per seed, erroring with the offending seed when degenerate.
pub fn per_seed_cosines(f: &FeatureMap, seeds: &PointSet) -> Result<Vec<ScalarField>> {
    seeds
        .points()
        .iter()
        .map(|&(r, c)| {
            cosine_field(f, (r, c)).map_err(|e| match e {
                Error::DegenerateSeed { .. } => Error::DegenerateSeed { row: r, col: c },
                other => other,
            })
        })
        .collect()
}

/// Sharpens similarity with a hard margin:
/// `a = (max(0, s - m_hard) / (1 - m_hard))^2`.
pub fn hard_margin_sharpen(s: &ScalarField, m_hard: f64) -> Result<ScalarField> {
    if !(0.0..1.0).contains(&m_hard) {
        return Err(Error::InvalidParameter(format!(
            "m_hard must be in [0, 1), got {m_hard}"
        )));
    }
    let denom = 1.0 - m_hard;
    let data = s
        .data()
        .iter()
        .map(|&v| {
            let t = ((v - m_hard).max(0.0)) / denom;
            t * t
        })
        .collect();
    ScalarField::new(s.height(), s.width(), data)
}

/// Evaluates one pixel of the local prior against a given seed.
pub fn prior_at(
    img: &Image,
    pixel: (usize, usize),
    seed: (usize, usize),
    sigma_s: f64,
    sigma_c: f64,
) -> f64 {
    let dr = pixel.0 as f64 - seed.0 as f64;
    let dc = pixel.1 as f64 - seed.1 as f64;
    let spatial = (-(dr * dr + dc * dc) / (2.0 * sigma_s * sigma_s)).exp();
    let di = img.intensity(pixel.0, pixel.1) - img.intensity(seed.0, seed.1);
    let chroma = (-(di * di) / (2.0 * sigma_c * sigma_c)).exp();
    spatial * chroma
}

/// Local image prior per pixel against that pixel's winner seed:
/// a Gaussian in spatial distance times a Gaussian in intensity gap.
pub fn local_prior(
    img: &Image,
    seeds: &PointSet,
    winner: &WinnerField,
    params: &AffinityParams,
) -> Result<ScalarField> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let seed = seeds.points()[winner.get(r, c)];
            data[r * w + c] = prior_at(img, (r, c), seed, params.sigma_s, params.sigma_c);
        }
    }
    ScalarField::new(h, w, data)
}

/// Elementwise product `A = a * w`.
pub fn propagation_target(a: &ScalarField, w: &ScalarField) -> Result<ScalarField> {
    if !a.same_shape(w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", w.height(), w.width()),
        });
    }
    let data = a.data().iter().zip(w.data()).map(|(&x, &y)| x * y).collect();
    ScalarField::new(a.height(), a.width(), data)
}

/// Runs the full target construction for one image.
pub fn build_bundle(
    f: &FeatureMap,
    img: &Image,
    seeds: &PointSet,
    params: &AffinityParams,
) -> Result<AffinityBundle> {
    params.validate()?;
    match params.winner_rule {
        WinnerRule::ArgmaxCosine => {
            let (s, winner) = seed_similarity(f, seeds)?;
            let a = hard_margin_sharpen(&s, params.m_hard)?;
            let w = local_prior(img, seeds, &winner, params)?;
            let target = propagation_target(&a, &w)?;
            Ok(AffinityBundle { s, a, w, target, winner })
        }
        WinnerRule::MaxProduct => {
            // Winner maximizes sharpened-affinity times per-seed prior.
            let per_seed = per_seed_cosines(f, seeds)?;
            let (h, wd) = (f.height(), f.width());
            let mut s = vec![0.0; h * wd];
            let mut a = vec![0.0; h * wd];
            let mut w = vec![0.0; h * wd];
            let mut target = vec![0.0; h * wd];
            let mut winner = vec![0usize; h * wd];
            let denom = 1.0 - params.m_hard;
            for r in 0..h {
                for c in 0..wd {
                    let idx = r * wd + c;
                    let mut best = f64::NEG_INFINITY;
                    for (k, field) in per_seed.iter().enumerate() {
                        let sv = field.get(r, c);
                        let t = (sv - params.m_hard).max(0.0) / denom;
                        let av = t * t;
                        let wv = prior_at(
                            img,
                            (r, c),
                            seeds.points()[k],
                            params.sigma_s,
                            params.sigma_c,
                        );
                        let prod = av * wv;
                        if prod > best {
                            best = prod;
                            s[idx] = sv;
                            a[idx] = av;
                            w[idx] = wv;
                            target[idx] = prod;
                            winner[idx] = k;
                        }
                    }
                }
            }
            Ok(AffinityBundle {
                s: ScalarField::new(h, wd, s)?,
                a: ScalarField::new(h, wd, a)?,
                w: ScalarField::new(h, wd, w)?,
                target: ScalarField::new(h, wd, target)?,
                winner: WinnerField::new(h, wd, winner),
            })
        }
    }
}

/// Normalized feature vector at a seed pixel, erroring if degenerate.
pub fn seed_prototype(f: &FeatureMap, seed: (usize, usize)) -> Result<Vec<f64>> {
    let normalized = l2_normalize_channels(f, EPS_NORM)?;
    let v = normalized.pixel_vector(seed.0, seed.1);
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateSeed { row: seed.0, col: seed.1 });
    }
    Ok(v)
}

impl AffinityBundle {
    /// Dumps the four fields plus the winner-index grid as CSVs into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, field) in
            [("s", &self.s), ("a", &self.a), ("w", &self.w), ("target", &self.target)]
        {
            let file = std::fs::File::create(dir.join(format!("{name}.csv")))?;
            field.write_csv(std::io::BufWriter::new(file))?;
        }
        let mut out = String::new();
        for r in 0..self.s.height() {
            let row: Vec<String> =
                (0..self.s.width()).map(|c| self.winner.get(r, c).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(dir.join("winner.csv"), out)?;
        Ok(())
    }
}
