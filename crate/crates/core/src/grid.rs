//! Dense-grid numerics shared by every other module: channel fields, pixel
//! fields, normalization, reductions, and connected components.
//!
//! All values are immutable after construction and safe to share across
//! workers; every operation here is a pure function. Storage is row-major.

use crate::error::{Error, Result};

/// Norm guard for L2 normalization: vectors shorter than this map to zero.
pub const EPS_NORM: f64 = 1e-8;

/// Intensity image with 1 or 3 channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    /// Channel-major layout: `data[c * h * w + r * w + col]`.
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 8x8, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at a pixel, averaged over channels.
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        let hw = self.height * self.width;
        let idx = row * self.width + col;
        let mut sum = 0.0;
        for c in 0..self.channels {
            sum += self.data[c * hw + idx];
        }
        sum / self.channels as f64
    }
}

/// C-channel scalar field over the pixel grid; the detector's feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    /// Channel-major layout: `data[c * h * w + r * w + col]`.
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("feature map dimensions must be non-zero".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "feature data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature values must be finite".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copies the channel vector at a pixel.
    pub fn pixel_vector(&self, row: usize, col: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        let idx = row * self.width + col;
        (0..self.channels).map(|c| self.data[c * hw + idx]).collect()
    }
}

/// Single-channel field of finite scalars. Houses similarities, priors,
/// targets, logits, and probabilities as role-tagged instances.
///
/// The `detached` marker records that the field is a stop-gradient constant
/// with respect to whatever produced it; losses that require a constant
/// target check it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
    detached: bool,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "field data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field values must be finite".into()));
        }
        Ok(Self { height, width, data, detached: false })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width], detached: false }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Marks the field as a stop-gradient constant.
    pub fn detach(mut self) -> Self {
        self.detached = true;
        self
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Binarizes at a threshold: mask pixel is 1 where `value > threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        let data = self.data.iter().map(|&v| u8::from(v > threshold)).collect();
        BinaryMask { height: self.height, width: self.width, data }
    }

    /// Writes the field as a CSV grid, one row per line.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for r in 0..self.height {
            let row = &self.data[r * self.width..(r + 1) * self.width];
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Integer pixel coordinates `(row, col)` of annotation points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointSet {
    points: Vec<(usize, usize)>,
}

impl PointSet {
    /// Builds an annotation point set: non-empty, in-bounds, no duplicates.
    pub fn new(points: Vec<(usize, usize)>, height: usize, width: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        for &(r, c) in &points {
            if r >= height || c >= width {
                return Err(Error::InvalidInput(format!(
                    "point ({r}, {c}) outside {height}x{width} grid"
                )));
            }
        }
        let mut seen = points.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != points.len() {
            return Err(Error::InvalidInput("duplicate annotation points".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Strictly binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        debug_assert!(value <= 1);
        self.data[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Pixel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// One connected component of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Member pixels in row-major discovery order.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Mean of member coordinates, `(row, col)`.
    pub centroid: (f64, f64),
}

impl Component {
    /// True when `(row, col)` is within Euclidean `dist` of the centroid.
    pub fn centroid_within(&self, row: f64, col: f64, dist: f64) -> bool {
        let dr = self.centroid.0 - row;
        let dc = self.centroid.1 - col;
        (dr * dr + dc * dc).sqrt() <= dist
    }
}

/// Labels connected components of the 1-pixels of a mask.
///
/// Components are disjoint, cover exactly the 1-pixels, and are returned in
/// order of their first pixel in row-major scan order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };

    for start in 0..h * w {
        if mask.data[start] == 0 || visited[start] {
            continue;
        }
        let mut pixels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            for &(dr, dc) in offsets {
                let nr = r as isize + dr;
                let nc = c as isize + dc;
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let nidx = nr as usize * w + nc as usize;
                if mask.data[nidx] == 1 && !visited[nidx] {
                    visited[nidx] = true;
                    stack.push(nidx);
                }
            }
        }
        pixels.sort_unstable();
        let area = pixels.len();
        let sum_r: usize = pixels.iter().map(|p| p.0).sum();
        let sum_c: usize = pixels.iter().map(|p| p.1).sum();
        components.push(Component {
            pixels,
            area,
            centroid: (sum_r as f64 / area as f64, sum_c as f64 / area as f64),
        });
    }
    components
}

/// L2-normalizes every pixel's channel vector.
///
/// A pixel whose vector norm is below `eps` maps to the zero vector.
pub fn l2_normalize_channels(f: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let (c, h, w) = (f.channels, f.height, f.width);
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for idx in 0..hw {
        let mut norm_sq = 0.0;
        for ch in 0..c {
            let v = f.data[ch * hw + idx];
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if norm >= eps {
            for ch in 0..c {
                out[ch * hw + idx] = f.data[ch * hw + idx] / norm;
            }
        }
    }
    FeatureMap::new(c, h, w, out)
}

/// Cosine similarity of every pixel's feature vector against the vector at
/// `anchor`. Output values lie in `[-1, 1]`; the anchor pixel maps to exactly 1.
///
/// Pixels with vector norm below [`EPS_NORM`] are treated as zero vectors and
/// score 0.
pub fn cosine_field(f: &FeatureMap, anchor: (usize, usize)) -> Result<ScalarField> {
    let (row, col) = anchor;
    if row >= f.height || col >= f.width {
        return Err(Error::InvalidInput(format!(
            "anchor ({row}, {col}) outside {}x{} grid",
            f.height, f.width
        )));
    }
    let normalized = l2_normalize_channels(f, EPS_NORM)?;
    let hw = f.height * f.width;
    let aidx = row * f.width + col;
    let anchor_vec: Vec<f64> = (0..f.channels).map(|c| normalized.data[c * hw + aidx]).collect();
    if anchor_vec.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateSeed { row, col });
    }
    let mut out = vec![0.0; hw];
    for idx in 0..hw {
        let mut dot = 0.0;
        for c in 0..f.channels {
            dot += normalized.data[c * hw + idx] * anchor_vec[c];
        }
        out[idx] = dot.clamp(-1.0, 1.0);
    }
    // The anchor's self-similarity is mathematically 1; pin it past float dust.
    out[aidx] = 1.0;
    ScalarField::new(f.height, f.width, out)
}
