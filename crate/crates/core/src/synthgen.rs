//! Deterministic synthetic infrared-like scene generation: Gaussian targets
//! stratified by size bins, warm clutter blobs, background gradient and
//! noise, single-point annotations, and frozen on-disk datasets with hashed
//! manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image, PointSet};
use crate::metrics::SizeBin;
use crate::pnm;

/// Scene synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// 1 or 3; synthetic scenes are single-channel unless a config demands 3.
    pub channels: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Probabilities over tiny/small/medium/large target areas; sums to 1.
    pub bin_mix: [f64; 4],
    pub amp_min: f64,
    pub amp_max: f64,
    /// Max anisotropy ratio of target Gaussians (>= 1).
    pub aniso_max: f64,
    pub clutter_min: usize,
    pub clutter_max: usize,
    /// Clutter shares the target intensity range so background mining stays
    /// non-trivial.
    pub clutter_amp_min: f64,
    pub clutter_amp_max: f64,
    /// Clutter spatial scale relative to a target of the same draw.
    pub clutter_sigma_scale: f64,
    /// Warm blobs placed in an annulus around a target, close enough to sit
    /// inside the spatial prior's reach yet never touching the ground truth.
    pub near_clutter_min: usize,
    pub near_clutter_max: usize,
    /// Spatial scale of near clutter (more compact than far clutter).
    pub near_clutter_sigma_scale: f64,
    pub noise_sigma: f64,
    pub bg_base_min: f64,
    pub bg_base_max: f64,
    pub bg_gradient_amp: f64,
    /// Annotation point jitter radius in pixels (0 or 1).
    pub point_jitter: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            targets_min: 1,
            targets_max: 3,
            bin_mix: [0.15, 0.25, 0.45, 0.15],
            amp_min: 0.35,
            amp_max: 0.6,
            aniso_max: 2.0,
            clutter_min: 2,
            clutter_max: 5,
            clutter_amp_min: 0.3,
            clutter_amp_max: 0.55,
            clutter_sigma_scale: 4.0,
            near_clutter_min: 1,
            near_clutter_max: 2,
            near_clutter_sigma_scale: 2.5,
            noise_sigma: 0.02,
            bg_base_min: 0.08,
            bg_base_max: 0.2,
            bg_gradient_amp: 0.1,
            point_jitter: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidParameter("grid must be at least 8x8".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.targets_min == 0 || self.targets_min > self.targets_max {
            return Err(Error::InvalidParameter("need 1 <= targets_min <= targets_max".into()));
        }
        let mix_sum: f64 = self.bin_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.bin_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bin_mix must be non-negative and sum to 1, got sum {mix_sum}"
            )));
        }
        for (name, v) in [
            ("amp_min", self.amp_min),
            ("amp_max", self.amp_max),
            ("clutter_amp_min", self.clutter_amp_min),
            ("clutter_amp_max", self.clutter_amp_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.amp_min > self.amp_max || self.clutter_amp_min > self.clutter_amp_max {
            return Err(Error::InvalidParameter("amplitude ranges must be ordered".into()));
        }
        if self.aniso_max < 1.0 {
            return Err(Error::InvalidParameter("aniso_max must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 || self.bg_gradient_amp < 0.0 {
            return Err(Error::InvalidParameter("noise and gradient must be >= 0".into()));
        }
        if self.point_jitter > 1 {
            return Err(Error::InvalidParameter("point_jitter must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Per-target ground-truth metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub area: usize,
    pub bin: SizeBin,
    pub centroid: (f64, f64),
    pub point: (usize, usize),
}

/// One synthetic scene: image, mask, one annotation point per target.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub gt: BinaryMask,
    pub points: PointSet,
    pub targets: Vec<TargetMeta>,
}

/// Sampled target-area ranges per bin, kept clear of the bin edges so the
/// discretized area stays in the intended bin most of the time.
const BIN_AREA_RANGES: [(usize, usize); 4] = [(4, 9), (12, 28), (33, 76), (84, 140)];

struct Blob {
    row: f64,
    col: f64,
    sigma_u: f64,
    sigma_v: f64,
    cos_t: f64,
    sin_t: f64,
    amp: f64,
    /// Half-amplitude semi-major axis.
    reach: f64,
}

impl Blob {
    fn profile(&self, r: f64, c: f64) -> f64 {
        let dr = r - self.row;
        let dc = c - self.col;
        let u = dc * self.cos_t + dr * self.sin_t;
        let v = -dc * self.sin_t + dr * self.cos_t;
        (-(u * u) / (2.0 * self.sigma_u * self.sigma_u)
            - (v * v) / (2.0 * self.sigma_v * self.sigma_v))
            .exp()
    }
}

fn sample_blob(
    rng: &mut ChaCha8Rng,
    area: f64,
    aniso_max: f64,
    amp_range: (f64, f64),
    h: usize,
    w: usize,
) -> Option<Blob> {
    // Half-amplitude ellipse area = 2 pi ln2 sigma_u sigma_v.
    let ratio = rng.random_range(1.0..aniso_max.max(1.0 + 1e-9));
    let sigma_v = (area / (2.0 * std::f64::consts::PI * 2f64.ln() * ratio)).sqrt();
    let sigma_u = ratio * sigma_v;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let amp = rng.random_range(amp_range.0..=amp_range.1);
    let reach = sigma_u * (2.0 * 2f64.ln()).sqrt();
    let margin = reach + 2.0;
    if 2.0 * margin + 2.0 >= h as f64 || 2.0 * margin + 2.0 >= w as f64 {
        return None;
    }
    let row = rng.random_range(margin..h as f64 - margin);
    let col = rng.random_range(margin..w as f64 - margin);
    Some(Blob { row, col, sigma_u, sigma_v, cos_t: theta.cos(), sin_t: theta.sin(), amp, reach })
}

fn far_enough(blob: &Blob, placed: &[(f64, f64, f64)]) -> bool {
    placed.iter().all(|&(r, c, reach)| {
        let d = ((blob.row - r).powi(2) + (blob.col - c).powi(2)).sqrt();
        d > blob.reach + reach + 2.0
    })
}

fn sample_bin(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> usize {
    let x: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (k, &p) in mix.iter().enumerate() {
        acc += p;
        if x < acc {
            return k;
        }
    }
    3
}

/// Renders one scene deterministically from `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(seed);
    let (h, w) = (spec.height, spec.width);

    // Background: base level plus a linear gradient of random orientation.
    let base = rng.random_range(spec.bg_base_min..=spec.bg_base_max);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (phi.cos(), phi.sin());
    let mut intensity = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64 - 0.5;
            let v = r as f64 / (h - 1) as f64 - 0.5;
            intensity[r * w + c] = base + spec.bg_gradient_amp * (u * gx + v * gy);
        }
    }

    // Targets.
    let n_targets = rng.random_range(spec.targets_min..=spec.targets_max);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut gt = BinaryMask::zeros(h, w);
    let mut targets = Vec::new();
    let mut points = Vec::new();
    for _ in 0..n_targets {
        // The bin is drawn once per target; placement retries only redraw
        // geometry, keeping the empirical bin frequencies unbiased.
        let bin = sample_bin(&mut rng, &spec.bin_mix);
        let mut chosen = None;
        for _attempt in 0..200 {
            let (lo, hi) = BIN_AREA_RANGES[bin];
            let area = rng.random_range(lo as f64..=hi as f64);
            let Some(blob) =
                sample_blob(&mut rng, area, spec.aniso_max, (spec.amp_min, spec.amp_max), h, w)
            else {
                continue;
            };
            if !far_enough(&blob, &placed) {
                continue;
            }
            // Paint the candidate's half-amplitude support and check the
            // discretized area still falls in the intended bin.
            let r0 = ((blob.row - blob.reach - 1.0).floor().max(0.0)) as usize;
            let r1 = ((blob.row + blob.reach + 1.0).ceil() as usize).min(h - 1);
            let c0 = ((blob.col - blob.reach - 1.0).floor().max(0.0)) as usize;
            let c1 = ((blob.col + blob.reach + 1.0).ceil() as usize).min(w - 1);
            let mut pixels = Vec::new();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if blob.profile(r as f64, c as f64) >= 0.5 {
                        pixels.push((r, c));
                    }
                }
            }
            if pixels.is_empty() {
                continue;
            }
            let actual_bin = SizeBin::from_area(pixels.len(), &[10, 30, 80]);
            if actual_bin != SizeBin::ALL[bin] {
                continue;
            }
            chosen = Some((blob, pixels, actual_bin));
            break;
        }
        let Some((blob, pixels, bin)) = chosen else {
            return Err(Error::GenerationFailed(format!(
                "could not place target {} of {n_targets} within retry budget",
                targets.len() + 1
            )));
        };
        // Render the full clipped Gaussian into the image.
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - blob.row).powi(2) + (c as f64 - blob.col).powi(2);
                if d2 <= (4.0 * blob.reach + 4.0).powi(2) {
                    intensity[r * w + c] += blob.amp * blob.profile(r as f64, c as f64);
                }
            }
        }
        // Annotation point: brightest profile pixel, optionally jittered
        // within the target's own support.
        let brightest = *pixels
            .iter()
            .max_by(|&&(ar, ac), &&(br, bc)| {
                blob.profile(ar as f64, ac as f64)
                    .partial_cmp(&blob.profile(br as f64, bc as f64))
                    .unwrap()
                    .then((br, bc).cmp(&(ar, ac)))
            })
            .unwrap();
        let mut point = brightest;
        if spec.point_jitter == 1 {
            for _ in 0..8 {
                let dr = rng.random_range(-1i64..=1);
                let dc = rng.random_range(-1i64..=1);
                let cand = (brightest.0 as i64 + dr, brightest.1 as i64 + dc);
                if cand.0 >= 0 && cand.1 >= 0 {
                    let cand = (cand.0 as usize, cand.1 as usize);
                    if pixels.contains(&cand) {
                        point = cand;
                        break;
                    }
                }
            }
        }
        let sum_r: usize = pixels.iter().map(|p| p.0).sum();
        let sum_c: usize = pixels.iter().map(|p| p.1).sum();
        let centroid = (sum_r as f64 / pixels.len() as f64, sum_c as f64 / pixels.len() as f64);
        for &(r, c) in &pixels {
            gt.set(r, c, 1);
        }
        placed.push((blob.row, blob.col, blob.reach));
        targets.push(TargetMeta { area: pixels.len(), bin, centroid, point });
        points.push(point);
    }

    // Near clutter: warm compact blobs in an annulus around targets, inside
    // the affinity prior's reach but clear of every ground-truth support.
    let n_near = rng.random_range(spec.near_clutter_min..=spec.near_clutter_max);
    for _ in 0..n_near {
        for _attempt in 0..100 {
            let k = rng.random_range(0..placed.len());
            let (tr, tc, t_reach) = placed[k];
            let (lo, hi) = BIN_AREA_RANGES[0];
            let area =
                rng.random_range(lo as f64..=hi as f64) * spec.near_clutter_sigma_scale;
            let ratio = rng.random_range(1.0..spec.aniso_max.max(1.0 + 1e-9));
            let sigma_v = (area / (2.0 * std::f64::consts::PI * 2f64.ln() * ratio)).sqrt();
            let sigma_u = ratio * sigma_v;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let amp = rng.random_range(spec.clutter_amp_min..=spec.clutter_amp_max);
            let reach = sigma_u * (2.0 * 2f64.ln()).sqrt();
            let gap = t_reach + reach + 3.0;
            let dist = rng.random_range(gap..(gap + 2.0));
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let blob = Blob {
                row: tr + dist * dir.sin(),
                col: tc + dist * dir.cos(),
                sigma_u,
                sigma_v,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                amp,
                reach,
            };
            let margin = reach + 1.0;
            if blob.row < margin
                || blob.col < margin
                || blob.row > h as f64 - margin
                || blob.col > w as f64 - margin
            {
                continue;
            }
            if !far_enough(&blob, &placed) {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - blob.row).powi(2) + (c as f64 - blob.col).powi(2);
                    if d2 <= (4.0 * blob.reach + 4.0).powi(2) {
                        intensity[r * w + c] += blob.amp * blob.profile(r as f64, c as f64);
                    }
                }
            }
            break;
        }
    }

    // Far clutter: warm blobs that never overlap target supports and leave
    // the ground truth untouched.
    let n_clutter = rng.random_range(spec.clutter_min..=spec.clutter_max);
    for _ in 0..n_clutter {
        for _attempt in 0..100 {
            let (lo, hi) = BIN_AREA_RANGES[rng.random_range(0..2usize)];
            let area = rng.random_range(lo as f64..=hi as f64) * spec.clutter_sigma_scale;
            let Some(blob) = sample_blob(
                &mut rng,
                area,
                spec.aniso_max,
                (spec.clutter_amp_min, spec.clutter_amp_max),
                h,
                w,
            ) else {
                continue;
            };
            if !far_enough(&blob, &placed) {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - blob.row).powi(2) + (c as f64 - blob.col).powi(2);
                    if d2 <= (4.0 * blob.reach + 4.0).powi(2) {
                        intensity[r * w + c] += blob.amp * blob.profile(r as f64, c as f64);
                    }
                }
            }
            break;
        }
    }

    // Sensor noise (Box-Muller), then clamp into [0, 1].
    if spec.noise_sigma > 0.0 {
        for v in intensity.iter_mut() {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v += spec.noise_sigma * z;
        }
    }
    for v in intensity.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let data = if spec.channels == 1 {
        intensity
    } else {
        let mut d = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            d.extend_from_slice(&intensity);
        }
        d
    };
    let image = Image::new(h, w, spec.channels, data)?;
    let points = PointSet::new(points, h, w)?;
    Ok(Scene { image, gt, points, targets })
}

fn scene_rng(seed: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(b"seedprop");
    ChaCha8Rng::from_seed(bytes)
}

/// Per-scene RNG stream id derived from `(master_seed, index)`.
pub fn scene_seed(master_seed: u64, index: usize) -> u64 {
    master_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One manifest line describing a stored scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub split: String,
    pub image_path: String,
    pub image_sha256: String,
    pub mask_path: String,
    pub mask_sha256: String,
    pub points_path: String,
    pub points_sha256: String,
    pub targets: Vec<TargetMeta>,
}

/// Manifest header line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub n: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<SceneRecord>,
    /// SHA-256 of the manifest file itself; downstream runs reference it.
    pub manifest_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Fraction of scenes assigned to the training split, by leading index.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Generates `n` scenes into `dir` and writes `manifest.jsonl` with per-file
/// hashes. Scene `i` derives its RNG stream from `(seed, i)`, so any scene
/// regenerates bit-identically in isolation.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let train_cut = ((n as f64) * TRAIN_FRACTION).ceil() as usize;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let scene = generate_scene(spec, scene_seed(seed, index))?;
        let image_path = format!("scene_{index:04}.pgm");
        let mask_path = format!("scene_{index:04}_mask.pgm");
        let points_path = format!("scene_{index:04}_points.txt");
        pnm::write_image(&dir.join(&image_path), &scene.image)?;
        pnm::write_mask(&dir.join(&mask_path), &scene.gt)?;
        let mut pts = String::new();
        for &(r, c) in scene.points.points() {
            pts.push_str(&format!("{r} {c}\n"));
        }
        std::fs::write(dir.join(&points_path), &pts)?;
        records.push(SceneRecord {
            index,
            split: if index < train_cut { "train".into() } else { "val".into() },
            image_sha256: hash_file(&dir.join(&image_path))?,
            image_path,
            mask_sha256: hash_file(&dir.join(&mask_path))?,
            mask_path,
            points_sha256: sha256_hex(pts.as_bytes()),
            points_path,
            targets: scene.targets.clone(),
        });
    }
    let header = ManifestHeader {
        n,
        seed,
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
    };
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for rec in &records {
        writeln!(out, "{}", serde_json::to_string(rec).expect("record serializes"))?;
    }
    std::fs::write(&manifest_path, &out)?;
    Ok(DatasetManifest { dir: dir.to_path_buf(), header, records, manifest_hash: sha256_hex(&out) })
}

/// A dataset loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub manifest_hash: String,
}

impl Dataset {
    /// Validation indices, falling back to the training split when the
    /// dataset is too small to have one.
    pub fn eval_indices(&self) -> &[usize] {
        if self.val_indices.is_empty() {
            &self.train_indices
        } else {
            &self.val_indices
        }
    }
}

/// Reads a manifest and loads every referenced scene, verifying hashes.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest_hash = sha256_hex(text.as_bytes());
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header: ManifestHeader = match lines.next() {
        Some(line) => serde_json::from_str(line).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            reason: format!("bad header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                reason: "empty manifest".into(),
            })
        }
    };
    let mut scenes = Vec::with_capacity(header.n);
    let mut train_indices = Vec::new();
    let mut val_indices = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            reason: format!("bad record: {e}"),
        })?;
        for (path, want) in [
            (&rec.image_path, &rec.image_sha256),
            (&rec.mask_path, &rec.mask_sha256),
            (&rec.points_path, &rec.points_sha256),
        ] {
            let got = hash_file(&dir.join(path))?;
            if got != *want {
                return Err(Error::Parse {
                    path: path.clone(),
                    reason: format!("hash mismatch: manifest {want}, file {got}"),
                });
            }
        }
        let image = pnm::read_image(&dir.join(&rec.image_path))?;
        let gt = pnm::read_mask(&dir.join(&rec.mask_path))?;
        let pts_text = std::fs::read_to_string(dir.join(&rec.points_path))?;
        let mut pts = Vec::new();
        for l in pts_text.lines() {
            let mut it = l.split_whitespace();
            let (Some(r), Some(c)) = (it.next(), it.next()) else {
                return Err(Error::Parse {
                    path: rec.points_path.clone(),
                    reason: format!("bad point line: {l:?}"),
                });
            };
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    path: rec.points_path.clone(),
                    reason: format!("bad coordinate {s:?}: {e}"),
                })
            };
            pts.push((parse(r)?, parse(c)?));
        }
        let points = PointSet::new(pts, image.height(), image.width())?;
        match rec.split.as_str() {
            "train" => train_indices.push(scenes.len()),
            _ => val_indices.push(scenes.len()),
        }
        scenes.push(Scene { image, gt, points, targets: rec.targets });
    }
    Ok(Dataset { scenes, train_indices, val_indices, manifest_hash })
}
