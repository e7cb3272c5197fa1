//! Reverse-mode gradient tape over dense field operations.
//!
//! The tape records field-granular operations (convolutions, pixelwise maps,
//! similarity fields, loss reductions) during a forward pass and accumulates
//! gradients in a single reverse sweep. Every node carries a [`PathTag`] so
//! that the gradient arriving at a watched node (the feature map) can be
//! split by which consumer pushed it: the logit head or the affinity-target
//! construction. That split is what the per-step desired/drift norms report.
//!
//! Values are stored flat: scalars as length-1 vectors, fields row-major,
//! channel stacks channel-major. All reductions run in fixed index order, so
//! identical inputs give bitwise-identical gradients.

use crate::error::{Error, Result};

/// Which supervision path a node belongs to, for gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathTag {
    Neutral,
    /// Downstream of the logit head: the "desired update" path.
    Logit,
    /// Inside the affinity-target construction: the drift-carrying path.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Field { h: usize, w: usize },
    Stack { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Field { h, w } => h * w,
            Shape::Stack { c, h, w } => c * h * w,
        }
    }
}

enum Op {
    Leaf,
    Conv3x3 { input: NodeId, weights: NodeId, bias: NodeId },
    Conv1x1 { input: NodeId, weights: NodeId, bias: NodeId },
    Softplus { input: NodeId },
    Sigmoid { input: NodeId },
    StackToField { input: NodeId },
    CenterChannels { input: NodeId },
    L2Normalize { input: NodeId, eps: f64 },
    Concat { a: NodeId, b: NodeId },
    CosineVsSeed { normalized: NodeId, seed_idx: usize },
    SelectByWinner { inputs: Vec<NodeId>, winner: Vec<usize> },
    MarginSharpen { input: NodeId, m_hard: f64 },
    MulConst { input: NodeId, factor: Vec<f64> },
    PropLoss { affinity: NodeId, prior: Vec<f64>, eps: f64 },
    SeedBce { prob: NodeId, seeds: Vec<usize>, eps: f64 },
    OhemBce { prob: NodeId, mined: Vec<usize>, eps: f64 },
    MeanField { input: NodeId },
    MseConst { input: NodeId, target: Vec<f64> },
    Contrast { normalized: NodeId, seeds: Vec<usize>, negatives: Vec<usize>, m_neg: f64 },
    PullToward { normalized: NodeId, seeds: Vec<usize>, positives: Vec<usize> },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node {
    values: Vec<f64>,
    shape: Shape,
    op: Op,
    tag: PathTag,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    watch_logit: Vec<f64>,
    watch_target: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Gradient pushed into the watched node by logit-path consumers.
    pub fn watch_logit(&self) -> &[f64] {
        &self.watch_logit
    }

    /// Gradient pushed into the watched node by target-path consumers.
    pub fn watch_target(&self) -> &[f64] {
        &self.watch_target
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `dst(y, x) += scale * src(y + dy, x + dx)` over the valid overlap.
fn axpy_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, scale: f64) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let src_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        let dst_row = &mut dst[y * w + x0..y * w + x1];
        for (d, &s) in dst_row.iter_mut().zip(src_row) {
            *d += scale * s;
        }
    }
}

/// `sum over valid (y, x) of a(y, x) * b(y + dy, x + dx)`.
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    if y0 >= y1 || x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let a_row = &a[y * w + x0..y * w + x1];
        let b_row = &b[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
    }
    acc
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The recording tape. One tape per loss evaluation; never shared.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, values: Vec<f64>, shape: Shape, op: Op, tag: PathTag) -> NodeId {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node { values, shape, op, tag });
        NodeId(self.nodes.len() - 1)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    /// True when every value of the node is finite.
    pub fn is_finite(&self, id: NodeId) -> bool {
        self.nodes[id.0].values.iter().all(|v| v.is_finite())
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf_scalar(&mut self, v: f64, tag: PathTag) -> NodeId {
        self.push(vec![v], Shape::Scalar, Op::Leaf, tag)
    }

    pub fn leaf_field(&mut self, values: Vec<f64>, h: usize, w: usize, tag: PathTag) -> NodeId {
        self.push(values, Shape::Field { h, w }, Op::Leaf, tag)
    }

    pub fn leaf_stack(
        &mut self,
        values: Vec<f64>,
        c: usize,
        h: usize,
        w: usize,
        tag: PathTag,
    ) -> NodeId {
        self.push(values, Shape::Stack { c, h, w }, Op::Leaf, tag)
    }

    // ---- detector ops ----------------------------------------------------

    /// 3x3 same-padding convolution. `weights` is a leaf of length
    /// `c_out * c_in * 9` laid out `[oc][ic][ky*3+kx]`; `bias` has length `c_out`.
    pub fn conv3x3(&mut self, input: NodeId, weights: NodeId, bias: NodeId, c_out: usize, tag: PathTag) -> Result<NodeId> {
        let (c_in, h, w) = match self.nodes[input.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "conv3x3 expects a stack input, got {other:?}"
                )))
            }
        };
        let wlen = self.nodes[weights.0].values.len();
        if wlen != c_out * c_in * 9 || self.nodes[bias.0].values.len() != c_out {
            return Err(Error::ShapeMismatch {
                expected: format!("{c_out}x{c_in}x9 weights, {c_out} bias"),
                got: format!("{wlen} weights, {} bias", self.nodes[bias.0].values.len()),
            });
        }
        let hw = h * w;
        let mut out = vec![0.0; c_out * hw];
        {
            let wv = &self.nodes[weights.0].values;
            let bv = &self.nodes[bias.0].values;
            let iv = &self.nodes[input.0].values;
            for oc in 0..c_out {
                let plane = &mut out[oc * hw..(oc + 1) * hw];
                plane.fill(bv[oc]);
                for ic in 0..c_in {
                    let src = &iv[ic * hw..(ic + 1) * hw];
                    for k in 0..9 {
                        let dy = (k / 3) as isize - 1;
                        let dx = (k % 3) as isize - 1;
                        axpy_shifted(plane, src, h, w, dy, dx, wv[(oc * c_in + ic) * 9 + k]);
                    }
                }
            }
        }
        Ok(self.push(out, Shape::Stack { c: c_out, h, w }, Op::Conv3x3 { input, weights, bias }, tag))
    }

    /// 1x1 convolution (channel mixer). `weights` length `c_out * c_in`.
    pub fn conv1x1(&mut self, input: NodeId, weights: NodeId, bias: NodeId, c_out: usize, tag: PathTag) -> Result<NodeId> {
        let (c_in, h, w) = match self.nodes[input.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "conv1x1 expects a stack input, got {other:?}"
                )))
            }
        };
        if self.nodes[weights.0].values.len() != c_out * c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("{c_out}x{c_in} weights"),
                got: format!("{}", self.nodes[weights.0].values.len()),
            });
        }
        let hw = h * w;
        let mut out = vec![0.0; c_out * hw];
        {
            let wv = &self.nodes[weights.0].values;
            let bv = &self.nodes[bias.0].values;
            let iv = &self.nodes[input.0].values;
            for oc in 0..c_out {
                let plane = &mut out[oc * hw..(oc + 1) * hw];
                plane.fill(bv[oc]);
                for ic in 0..c_in {
                    let scale = wv[oc * c_in + ic];
                    let src = &iv[ic * hw..(ic + 1) * hw];
                    for (d, &s) in plane.iter_mut().zip(src) {
                        *d += scale * s;
                    }
                }
            }
        }
        Ok(self.push(out, Shape::Stack { c: c_out, h, w }, Op::Conv1x1 { input, weights, bias }, tag))
    }

    pub fn softplus(&mut self, input: NodeId, tag: PathTag) -> NodeId {
        let shape = self.nodes[input.0].shape;
        let out: Vec<f64> = self.nodes[input.0].values.iter().map(|&x| stable_softplus(x)).collect();
        self.push(out, shape, Op::Softplus { input }, tag)
    }

    pub fn sigmoid(&mut self, input: NodeId, tag: PathTag) -> NodeId {
        let shape = self.nodes[input.0].shape;
        let out: Vec<f64> = self.nodes[input.0].values.iter().map(|&x| stable_sigmoid(x)).collect();
        self.push(out, shape, Op::Sigmoid { input }, tag)
    }

    /// Views a single-channel stack as a field.
    pub fn stack_to_field(&mut self, input: NodeId, tag: PathTag) -> Result<NodeId> {
        let (c, h, w) = match self.nodes[input.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "stack_to_field expects a stack, got {other:?}"
                )))
            }
        };
        if c != 1 {
            return Err(Error::InvalidInput(format!("stack_to_field needs c=1, got {c}")));
        }
        let out = self.nodes[input.0].values.clone();
        Ok(self.push(out, Shape::Field { h, w }, Op::StackToField { input }, tag))
    }

    // ---- affinity ops ----------------------------------------------------

    /// Subtracts each channel's spatial mean, removing the shared component
    /// that would otherwise dominate every pixel-to-pixel cosine.
    pub fn center_channels(&mut self, input: NodeId, tag: PathTag) -> Result<NodeId> {
        let (c, h, w) = match self.nodes[input.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "center_channels expects a stack, got {other:?}"
                )))
            }
        };
        let hw = h * w;
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &iv[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(plane) {
                *o = v - mean;
            }
        }
        Ok(self.push(out, Shape::Stack { c, h, w }, Op::CenterChannels { input }, tag))
    }

    /// Per-pixel channel-vector L2 normalization with an epsilon guard.
    pub fn l2_normalize(&mut self, input: NodeId, eps: f64, tag: PathTag) -> Result<NodeId> {
        let (c, h, w) = match self.nodes[input.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "l2_normalize expects a stack, got {other:?}"
                )))
            }
        };
        let hw = h * w;
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0; c * hw];
        for idx in 0..hw {
            let mut nsq = 0.0;
            for ch in 0..c {
                let v = iv[ch * hw + idx];
                nsq += v * v;
            }
            let norm = nsq.sqrt();
            if norm >= eps {
                for ch in 0..c {
                    out[ch * hw + idx] = iv[ch * hw + idx] / norm;
                }
            }
        }
        Ok(self.push(out, Shape::Stack { c, h, w }, Op::L2Normalize { input, eps }, tag))
    }

    /// Channel-wise concatenation of two stacks over the same grid.
    pub fn concat(&mut self, a: NodeId, b: NodeId, tag: PathTag) -> Result<NodeId> {
        let (ca, h, w) = match self.nodes[a.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => return Err(Error::InvalidInput(format!("concat expects stacks, got {other:?}"))),
        };
        let (cb, hb, wb) = match self.nodes[b.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => return Err(Error::InvalidInput(format!("concat expects stacks, got {other:?}"))),
        };
        if h != hb || w != wb {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w}"),
                got: format!("{hb}x{wb}"),
            });
        }
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(&self.nodes[a.0].values);
        out.extend_from_slice(&self.nodes[b.0].values);
        Ok(self.push(out, Shape::Stack { c: ca + cb, h, w }, Op::Concat { a, b }, tag))
    }

    /// Cosine of every pixel of a *normalized* stack against the (normalized)
    /// vector at `seed_idx`. Values are clamped to `[-1, 1]`; the seed pixel
    /// itself is pinned to exactly 1 (its true gradient through the
    /// normalization is zero).
    pub fn cosine_vs_seed(&mut self, normalized: NodeId, seed_idx: usize, tag: PathTag) -> Result<NodeId> {
        let (c, h, w) = match self.nodes[normalized.0].shape {
            Shape::Stack { c, h, w } => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "cosine_vs_seed expects a stack, got {other:?}"
                )))
            }
        };
        let hw = h * w;
        if seed_idx >= hw {
            return Err(Error::InvalidInput(format!("seed index {seed_idx} out of range")));
        }
        let iv = &self.nodes[normalized.0].values;
        let seed_vec: Vec<f64> = (0..c).map(|ch| iv[ch * hw + seed_idx]).collect();
        if seed_vec.iter().all(|&v| v == 0.0) {
            let row = seed_idx / w;
            let col = seed_idx % w;
            return Err(Error::DegenerateSeed { row, col });
        }
        let mut out = vec![0.0; hw];
        for idx in 0..hw {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += iv[ch * hw + idx] * seed_vec[ch];
            }
            out[idx] = dot.clamp(-1.0, 1.0);
        }
        out[seed_idx] = 1.0;
        Ok(self.push(out, Shape::Field { h, w }, Op::CosineVsSeed { normalized, seed_idx }, tag))
    }

    /// Per-pixel selection among several fields by a fixed winner index map.
    pub fn select_by_winner(&mut self, inputs: Vec<NodeId>, winner: Vec<usize>, tag: PathTag) -> Result<NodeId> {
        let (h, w) = match self.nodes[inputs[0].0].shape {
            Shape::Field { h, w } => (h, w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "select_by_winner expects fields, got {other:?}"
                )))
            }
        };
        if winner.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{} winners", h * w),
                got: format!("{}", winner.len()),
            });
        }
        let mut out = vec![0.0; h * w];
        for (idx, &k) in winner.iter().enumerate() {
            out[idx] = self.nodes[inputs[k].0].values[idx];
        }
        Ok(self.push(out, Shape::Field { h, w }, Op::SelectByWinner { inputs, winner }, tag))
    }

    /// `a = (max(0, s - m_hard) / (1 - m_hard))^2` elementwise.
    pub fn margin_sharpen(&mut self, input: NodeId, m_hard: f64, tag: PathTag) -> Result<NodeId> {
        if !(0.0..1.0).contains(&m_hard) {
            return Err(Error::InvalidParameter(format!("m_hard must be in [0, 1), got {m_hard}")));
        }
        let shape = self.nodes[input.0].shape;
        let denom = 1.0 - m_hard;
        let out: Vec<f64> = self.nodes[input.0]
            .values
            .iter()
            .map(|&s| {
                let t = (s - m_hard).max(0.0) / denom;
                t * t
            })
            .collect();
        Ok(self.push(out, shape, Op::MarginSharpen { input, m_hard }, tag))
    }

    /// Elementwise product with a constant field.
    pub fn mul_const(&mut self, input: NodeId, factor: Vec<f64>, tag: PathTag) -> Result<NodeId> {
        let shape = self.nodes[input.0].shape;
        if factor.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", shape.len()),
                got: format!("{}", factor.len()),
            });
        }
        let out: Vec<f64> =
            self.nodes[input.0].values.iter().zip(&factor).map(|(&a, &b)| a * b).collect();
        Ok(self.push(out, shape, Op::MulConst { input, factor }, tag))
    }

    // ---- loss reductions ---------------------------------------------------

    /// `sum_i prior_i (1 - a_i)^2 / (sum_i prior_i + eps)`; gradient flows
    /// through the affinity only, the prior is a constant.
    pub fn prop_loss(&mut self, affinity: NodeId, prior: Vec<f64>, eps: f64, tag: PathTag) -> Result<NodeId> {
        let av = &self.nodes[affinity.0].values;
        if prior.len() != av.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", av.len()),
                got: format!("{}", prior.len()),
            });
        }
        let denom: f64 = prior.iter().sum::<f64>() + eps;
        let num: f64 = prior.iter().zip(av).map(|(&w, &a)| w * (1.0 - a) * (1.0 - a)).sum();
        let v = num / denom;
        Ok(self.push(vec![v], Shape::Scalar, Op::PropLoss { affinity, prior, eps }, tag))
    }

    /// Mean over seed pixels of `-ln(clamp(p, eps, 1))`.
    pub fn seed_bce(&mut self, prob: NodeId, seeds: Vec<usize>, eps: f64, tag: PathTag) -> Result<NodeId> {
        if seeds.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let pv = &self.nodes[prob.0].values;
        let v = seeds.iter().map(|&i| -(pv[i].clamp(eps, 1.0)).ln()).sum::<f64>()
            / seeds.len() as f64;
        Ok(self.push(vec![v], Shape::Scalar, Op::SeedBce { prob, seeds, eps }, tag))
    }

    /// Mean over mined pixels of `-ln(clamp(1 - p, eps, 1))`.
    pub fn ohem_bce(&mut self, prob: NodeId, mined: Vec<usize>, eps: f64, tag: PathTag) -> Result<NodeId> {
        let pv = &self.nodes[prob.0].values;
        let v = if mined.is_empty() {
            0.0
        } else {
            mined.iter().map(|&i| -((1.0 - pv[i]).clamp(eps, 1.0)).ln()).sum::<f64>()
                / mined.len() as f64
        };
        Ok(self.push(vec![v], Shape::Scalar, Op::OhemBce { prob, mined, eps }, tag))
    }

    pub fn mean_field(&mut self, input: NodeId, tag: PathTag) -> NodeId {
        let v = self.nodes[input.0].values.iter().sum::<f64>()
            / self.nodes[input.0].values.len() as f64;
        self.push(vec![v], Shape::Scalar, Op::MeanField { input }, tag)
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, input: NodeId, target: Vec<f64>, tag: PathTag) -> Result<NodeId> {
        let iv = &self.nodes[input.0].values;
        if target.len() != iv.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", iv.len()),
                got: format!("{}", target.len()),
            });
        }
        let v = iv.iter().zip(&target).map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>()
            / iv.len() as f64;
        Ok(self.push(vec![v], Shape::Scalar, Op::MseConst { input, target }, tag))
    }

    /// Negative-only contrastive hinge between normalized seed prototypes and
    /// mined hard-background pixels, averaged over seeds then negatives.
    /// Empty negative sets score 0.
    pub fn contrast(
        &mut self,
        normalized: NodeId,
        seeds: Vec<usize>,
        negatives: Vec<usize>,
        m_neg: f64,
        tag: PathTag,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&m_neg) {
            return Err(Error::InvalidParameter(format!("m_neg must be in [0, 1), got {m_neg}")));
        }
        if seeds.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let (c, hw) = match self.nodes[normalized.0].shape {
            Shape::Stack { c, h, w } => (c, h * w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "contrast expects a stack, got {other:?}"
                )))
            }
        };
        let iv = &self.nodes[normalized.0].values;
        let mut total = 0.0;
        if !negatives.is_empty() {
            for &p in &seeds {
                let mut seed_sum = 0.0;
                for &i in &negatives {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += iv[ch * hw + p] * iv[ch * hw + i];
                    }
                    let u = (dot - m_neg).max(0.0);
                    seed_sum += u * u;
                }
                total += seed_sum / negatives.len() as f64;
            }
            total /= seeds.len() as f64;
        }
        Ok(self.push(
            vec![total],
            Shape::Scalar,
            Op::Contrast { normalized, seeds, negatives, m_neg },
            tag,
        ))
    }

    /// Symmetric positive aggregation: pulls the given pixels toward the
    /// seed prototypes, `mean_p mean_i (1 - <z_p, z_i>)^2`. Empty positive
    /// sets score 0.
    pub fn pull_toward(
        &mut self,
        normalized: NodeId,
        seeds: Vec<usize>,
        positives: Vec<usize>,
        tag: PathTag,
    ) -> Result<NodeId> {
        if seeds.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let (c, hw) = match self.nodes[normalized.0].shape {
            Shape::Stack { c, h, w } => (c, h * w),
            other => {
                return Err(Error::InvalidInput(format!(
                    "pull_toward expects a stack, got {other:?}"
                )))
            }
        };
        let iv = &self.nodes[normalized.0].values;
        let mut total = 0.0;
        if !positives.is_empty() {
            for &p in &seeds {
                let mut seed_sum = 0.0;
                for &i in &positives {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += iv[ch * hw + p] * iv[ch * hw + i];
                    }
                    seed_sum += (1.0 - dot) * (1.0 - dot);
                }
                total += seed_sum / positives.len() as f64;
            }
            total /= seeds.len() as f64;
        }
        Ok(self.push(
            vec![total],
            Shape::Scalar,
            Op::PullToward { normalized, seeds, positives },
            tag,
        ))
    }

    /// `sum_k coeff_k * term_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>, tag: PathTag) -> NodeId {
        let v = terms.iter().map(|&(id, cf)| cf * self.nodes[id.0].values[0]).sum();
        self.push(vec![v], Shape::Scalar, Op::WeightedSum { terms }, tag)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar node seeded with `seed`. When `watch` is
    /// set, gradient contributions arriving at that node are additionally
    /// bucketed by the pushing consumer's [`PathTag`].
    pub fn backward(&self, output: NodeId, seed: f64, watch: Option<NodeId>) -> Gradients {
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        let watch_len = watch.map(|id| self.nodes[id.0].values.len()).unwrap_or(0);
        let mut watch_logit = vec![0.0; watch_len];
        let mut watch_target = vec![0.0; watch_len];
        grads[output.0][0] = seed;

        for i in (0..=output.0).rev() {
            let tag = self.nodes[i].tag;
            // Swap the node's gradient out so we can mutate input buffers.
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            let sink = |grads: &mut Vec<Vec<f64>>,
                            watch_logit: &mut Vec<f64>,
                            watch_target: &mut Vec<f64>,
                            dst: NodeId,
                            idx: usize,
                            val: f64| {
                grads[dst.0][idx] += val;
                if Some(dst) == watch {
                    match tag {
                        PathTag::Logit => watch_logit[idx] += val,
                        PathTag::Target => watch_target[idx] += val,
                        PathTag::Neutral => {}
                    }
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv3x3 { input, weights, bias } => {
                    let (c_in, h, w) = match self.nodes[input.0].shape {
                        Shape::Stack { c, h, w } => (c, h, w),
                        _ => unreachable!(),
                    };
                    let c_out = match self.nodes[i].shape {
                        Shape::Stack { c, .. } => c,
                        _ => unreachable!(),
                    };
                    let hw = h * w;
                    let wv = &self.nodes[weights.0].values;
                    let iv = &self.nodes[input.0].values;
                    // Fast path: bulk accumulation, then route through the
                    // sink only for watch bookkeeping.
                    let mut g_in = vec![0.0; c_in * hw];
                    for oc in 0..c_out {
                        let g_plane = &g[oc * hw..(oc + 1) * hw];
                        grads[bias.0][oc] += g_plane.iter().sum::<f64>();
                        for ic in 0..c_in {
                            let gi_plane = &mut g_in[ic * hw..(ic + 1) * hw];
                            let in_plane = &iv[ic * hw..(ic + 1) * hw];
                            for k in 0..9 {
                                let dy = (k / 3) as isize - 1;
                                let dx = (k % 3) as isize - 1;
                                let widx = (oc * c_in + ic) * 9 + k;
                                axpy_shifted(gi_plane, g_plane, h, w, -dy, -dx, wv[widx]);
                                grads[weights.0][widx] +=
                                    dot_shifted(g_plane, in_plane, h, w, dy, dx);
                            }
                        }
                    }
                    for (idx, val) in g_in.into_iter().enumerate() {
                        if val != 0.0 {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, val);
                        }
                    }
                }
                Op::Conv1x1 { input, weights, bias } => {
                    let (c_in, h, w) = match self.nodes[input.0].shape {
                        Shape::Stack { c, h, w } => (c, h, w),
                        _ => unreachable!(),
                    };
                    let c_out = match self.nodes[i].shape {
                        Shape::Stack { c, .. } => c,
                        _ => unreachable!(),
                    };
                    let hw = h * w;
                    let wv = &self.nodes[weights.0].values;
                    let iv = &self.nodes[input.0].values;
                    for oc in 0..c_out {
                        let g_plane = &g[oc * hw..(oc + 1) * hw];
                        grads[bias.0][oc] += g_plane.iter().sum::<f64>();
                        for ic in 0..c_in {
                            let scale = wv[oc * c_in + ic];
                            let mut wgrad = 0.0;
                            for (idx, &gv) in g_plane.iter().enumerate() {
                                if gv != 0.0 {
                                    sink(
                                        &mut grads,
                                        &mut watch_logit,
                                        &mut watch_target,
                                        *input,
                                        ic * hw + idx,
                                        scale * gv,
                                    );
                                }
                                wgrad += gv * iv[ic * hw + idx];
                            }
                            grads[weights.0][oc * c_in + ic] += wgrad;
                        }
                    }
                }
                Op::Softplus { input } => {
                    let iv = &self.nodes[input.0].values;
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv != 0.0 {
                            let d = stable_sigmoid(iv[idx]);
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, gv * d);
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let ov = &self.nodes[i].values;
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv != 0.0 {
                            let s = ov[idx];
                            sink(
                                &mut grads,
                                &mut watch_logit,
                                &mut watch_target,
                                *input,
                                idx,
                                gv * s * (1.0 - s),
                            );
                        }
                    }
                }
                Op::StackToField { input } => {
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv != 0.0 {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, gv);
                        }
                    }
                }
                Op::CenterChannels { input } => {
                    let (c, hw) = match self.nodes[input.0].shape {
                        Shape::Stack { c, h, w } => (c, h * w),
                        _ => unreachable!(),
                    };
                    for ch in 0..c {
                        let plane = &g[ch * hw..(ch + 1) * hw];
                        let mean = plane.iter().sum::<f64>() / hw as f64;
                        for (idx, &gv) in plane.iter().enumerate() {
                            let val = gv - mean;
                            if val != 0.0 {
                                sink(
                                    &mut grads,
                                    &mut watch_logit,
                                    &mut watch_target,
                                    *input,
                                    ch * hw + idx,
                                    val,
                                );
                            }
                        }
                    }
                }
                Op::L2Normalize { input, eps } => {
                    let (c, h, w) = match self.nodes[input.0].shape {
                        Shape::Stack { c, h, w } => (c, h, w),
                        _ => unreachable!(),
                    };
                    let hw = h * w;
                    let iv = &self.nodes[input.0].values;
                    let ov = &self.nodes[i].values;
                    for idx in 0..hw {
                        let mut nsq = 0.0;
                        for ch in 0..c {
                            let v = iv[ch * hw + idx];
                            nsq += v * v;
                        }
                        let norm = nsq.sqrt();
                        if norm < *eps {
                            continue;
                        }
                        // d/df (f/|f|) applied to g: (g - (g.n) n) / |f|
                        let mut gdotn = 0.0;
                        for ch in 0..c {
                            gdotn += g[ch * hw + idx] * ov[ch * hw + idx];
                        }
                        for ch in 0..c {
                            let val = (g[ch * hw + idx] - gdotn * ov[ch * hw + idx]) / norm;
                            if val != 0.0 {
                                sink(
                                    &mut grads,
                                    &mut watch_logit,
                                    &mut watch_target,
                                    *input,
                                    ch * hw + idx,
                                    val,
                                );
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let alen = self.nodes[a.0].values.len();
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        if idx < alen {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *a, idx, gv);
                        } else {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *b, idx - alen, gv);
                        }
                    }
                }
                Op::CosineVsSeed { normalized, seed_idx } => {
                    let (c, h, w) = match self.nodes[normalized.0].shape {
                        Shape::Stack { c, h, w } => (c, h, w),
                        _ => unreachable!(),
                    };
                    let hw = h * w;
                    let nv = &self.nodes[normalized.0].values;
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv == 0.0 || idx == *seed_idx {
                            continue;
                        }
                        for ch in 0..c {
                            let gp = gv * nv[ch * hw + seed_idx];
                            if gp != 0.0 {
                                sink(
                                    &mut grads,
                                    &mut watch_logit,
                                    &mut watch_target,
                                    *normalized,
                                    ch * hw + idx,
                                    gp,
                                );
                            }
                            let gs = gv * nv[ch * hw + idx];
                            if gs != 0.0 {
                                sink(
                                    &mut grads,
                                    &mut watch_logit,
                                    &mut watch_target,
                                    *normalized,
                                    ch * hw + seed_idx,
                                    gs,
                                );
                            }
                        }
                    }
                }
                Op::SelectByWinner { inputs, winner } => {
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv != 0.0 {
                            sink(
                                &mut grads,
                                &mut watch_logit,
                                &mut watch_target,
                                inputs[winner[idx]],
                                idx,
                                gv,
                            );
                        }
                    }
                }
                Op::MarginSharpen { input, m_hard } => {
                    let iv = &self.nodes[input.0].values;
                    let denom = 1.0 - m_hard;
                    for (idx, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let t = (iv[idx] - m_hard).max(0.0) / denom;
                        let d = 2.0 * t / denom;
                        if d != 0.0 {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, gv * d);
                        }
                    }
                }
                Op::MulConst { input, factor } => {
                    for (idx, &gv) in g.iter().enumerate() {
                        let val = gv * factor[idx];
                        if val != 0.0 {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, val);
                        }
                    }
                }
                Op::PropLoss { affinity, prior, eps } => {
                    let gv = g[0];
                    if gv != 0.0 {
                        let av = &self.nodes[affinity.0].values;
                        let denom: f64 = prior.iter().sum::<f64>() + eps;
                        for (idx, (&w, &a)) in prior.iter().zip(av).enumerate() {
                            let d = -2.0 * w * (1.0 - a) / denom;
                            if d != 0.0 {
                                sink(
                                    &mut grads,
                                    &mut watch_logit,
                                    &mut watch_target,
                                    *affinity,
                                    idx,
                                    gv * d,
                                );
                            }
                        }
                    }
                }
                Op::SeedBce { prob, seeds, eps } => {
                    let gv = g[0];
                    if gv != 0.0 {
                        let pv = &self.nodes[prob.0].values;
                        let k = seeds.len() as f64;
                        for &idx in seeds {
                            if pv[idx] >= *eps {
                                let d = -1.0 / (k * pv[idx].clamp(*eps, 1.0));
                                sink(&mut grads, &mut watch_logit, &mut watch_target, *prob, idx, gv * d);
                            }
                        }
                    }
                }
                Op::OhemBce { prob, mined, eps } => {
                    let gv = g[0];
                    if gv != 0.0 && !mined.is_empty() {
                        let pv = &self.nodes[prob.0].values;
                        let k = mined.len() as f64;
                        for &idx in mined {
                            let q = 1.0 - pv[idx];
                            if q >= *eps {
                                let d = 1.0 / (k * q.clamp(*eps, 1.0));
                                sink(&mut grads, &mut watch_logit, &mut watch_target, *prob, idx, gv * d);
                            }
                        }
                    }
                }
                Op::MeanField { input } => {
                    let gv = g[0];
                    if gv != 0.0 {
                        let n = self.nodes[input.0].values.len() as f64;
                        let d = gv / n;
                        for idx in 0..self.nodes[input.0].values.len() {
                            sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, d);
                        }
                    }
                }
                Op::MseConst { input, target } => {
                    let gv = g[0];
                    if gv != 0.0 {
                        let iv = &self.nodes[input.0].values;
                        let n = iv.len() as f64;
                        for (idx, (&p, &t)) in iv.iter().zip(target).enumerate() {
                            let d = 2.0 * (p - t) / n;
                            if d != 0.0 {
                                sink(&mut grads, &mut watch_logit, &mut watch_target, *input, idx, gv * d);
                            }
                        }
                    }
                }
                Op::Contrast { normalized, seeds, negatives, m_neg } => {
                    let gv = g[0];
                    if gv != 0.0 && !negatives.is_empty() {
                        let (c, hw) = match self.nodes[normalized.0].shape {
                            Shape::Stack { c, h, w } => (c, h * w),
                            _ => unreachable!(),
                        };
                        let nv = &self.nodes[normalized.0].values;
                        let scale = gv / (seeds.len() as f64 * negatives.len() as f64);
                        for &p in seeds {
                            for &i in negatives {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    dot += nv[ch * hw + p] * nv[ch * hw + i];
                                }
                                let u = dot - m_neg;
                                if u > 0.0 {
                                    let coeff = 2.0 * u * scale;
                                    for ch in 0..c {
                                        sink(
                                            &mut grads,
                                            &mut watch_logit,
                                            &mut watch_target,
                                            *normalized,
                                            ch * hw + i,
                                            coeff * nv[ch * hw + p],
                                        );
                                        sink(
                                            &mut grads,
                                            &mut watch_logit,
                                            &mut watch_target,
                                            *normalized,
                                            ch * hw + p,
                                            coeff * nv[ch * hw + i],
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                Op::PullToward { normalized, seeds, positives } => {
                    let gv = g[0];
                    if gv != 0.0 && !positives.is_empty() {
                        let (c, hw) = match self.nodes[normalized.0].shape {
                            Shape::Stack { c, h, w } => (c, h * w),
                            _ => unreachable!(),
                        };
                        let nv = &self.nodes[normalized.0].values;
                        let scale = gv / (seeds.len() as f64 * positives.len() as f64);
                        for &p in seeds {
                            for &i in positives {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    dot += nv[ch * hw + p] * nv[ch * hw + i];
                                }
                                let coeff = -2.0 * (1.0 - dot) * scale;
                                if coeff != 0.0 {
                                    for ch in 0..c {
                                        sink(
                                            &mut grads,
                                            &mut watch_logit,
                                            &mut watch_target,
                                            *normalized,
                                            ch * hw + i,
                                            coeff * nv[ch * hw + p],
                                        );
                                        sink(
                                            &mut grads,
                                            &mut watch_logit,
                                            &mut watch_target,
                                            *normalized,
                                            ch * hw + p,
                                            coeff * nv[ch * hw + i],
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    let gv = g[0];
                    if gv != 0.0 {
                        for &(id, cf) in terms {
                            if cf != 0.0 {
                                sink(&mut grads, &mut watch_logit, &mut watch_target, id, 0, gv * cf);
                            }
                        }
                    }
                }
            }
            grads[i] = g;
        }
        Gradients { grads, watch_logit, watch_target }
    }
}
