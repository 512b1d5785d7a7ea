//! Region pooling, region transform, attention and classification.
//!
//! Pooled region features are the assignment-weighted mean residuals of the
//! pixel features against each part, scaled by `1/σ_k` and L2-normalized:
//!
//! ```text
//! z'_k = (Σ_ij q_ij^k x_ij / Σ_ij q_ij^k - d_k) / σ_k,    z_k = z'_k / ‖z'_k‖
//! ```
//!
//! The `K` regions are then treated as `K` spatial positions of a `1×K`
//! feature map, so the residual bottlenecks (`f_z`) and the attention stack
//! (`f_a`) are plain 1×1 convolutions shared across regions.

use rand::Rng;

use crate::autodiff::linalg::gemm;
use crate::autodiff::{softmax_axis, Function, Graph, Var};
use crate::error::{Error, Result};
use crate::grouping::{AssignmentMap, PartDictionary};
use crate::nn::{visit_all, visit_all_mut, BatchNorm, Conv, Linear, Mode, Parameters, Session};
use crate::parallel;
use crate::tensor::Tensor;

/// Columns whose pre-normalization norm falls below this are zeroed.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Assignment mass below which a region counts as empty.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// `D×K` matrix of pooled region features.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures(pub Tensor);

/// Attention over the `K` regions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector(pub Vec<f64>);

/// `H×W` pixel attribution scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap(pub Tensor);

struct PoolRegions {
    n: usize,
    d: usize,
    k: usize,
    p: usize,
    /// Assignment mass per (sample, part).
    mass: Vec<f64>,
    /// Weighted mean feature, `N×D×K`.
    mean: Vec<f64>,
    /// Unnormalized features and their norms; a zero norm marks a dead column.
    raw: Vec<f64>,
    norms: Vec<f64>,
}

impl Function for PoolRegions {
    fn name(&self) -> &'static str {
        "pool_regions"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (n, d, k, p) = (self.n, self.d, self.k, self.p);
        let x = inputs[0].data();
        let q = inputs[1].data();
        let sig = inputs[3].data();
        let z = output.data();
        let gz = grad.data();

        // Gradient w.r.t. the weighted mean, already divided by the mass.
        let mut gmean = vec![0.0; n * d * k];
        let mut gshared = vec![0.0; n * (k * d + k)];
        parallel::for_each_chunk2(&mut gmean, d * k, &mut gshared, k * d + k, |b, gm, gs| {
            let (gd, gsig) = gs.split_at_mut(k * d);
            for c in 0..k {
                let norm = self.norms[b * k + c];
                if norm == 0.0 {
                    continue;
                }
                let at = |f: usize| (b * d + f) * k + c;
                let dot: f64 = (0..d).map(|f| z[at(f)] * gz[at(f)]).sum();
                let mut graw_dot_raw = 0.0;
                for f in 0..d {
                    let graw = (gz[at(f)] - z[at(f)] * dot) / norm;
                    graw_dot_raw += graw * self.raw[at(f)];
                    gm[f * k + c] = graw / sig[c] / self.mass[b * k + c];
                    gd[c * d + f] -= graw / sig[c];
                }
                gsig[c] -= graw_dot_raw / sig[c];
            }
        });

        let mut gx = vec![0.0; n * d * p];
        let mut gq = vec![0.0; n * k * p];
        if needs[0] || needs[1] {
            parallel::for_each_chunk2(&mut gx, d * p, &mut gq, k * p, |b, gxs, gqs| {
                let gm = &gmean[b * d * k..(b + 1) * d * k];
                let xs = &x[b * d * p..(b + 1) * d * p];
                let qs = &q[b * k * p..(b + 1) * k * p];
                // gx = gm (D×K) · q (K×P)
                gemm(d, k, p, 1.0, gm, false, qs, false, 0.0, gxs);
                // gq[c, p] = gm[:, c] · (x[:, p] - mean[:, c])
                gemm(k, d, p, 1.0, gm, true, xs, false, 0.0, gqs);
                for c in 0..k {
                    let offset: f64 = (0..d).map(|f| gm[f * k + c] * self.mean[(b * d + f) * k + c]).sum();
                    gqs[c * p..(c + 1) * p].iter_mut().for_each(|v| *v -= offset);
                }
            });
        }
        let mut gd = vec![0.0; k * d];
        let mut gsig = vec![0.0; k];
        for chunk in gshared.chunks(k * d + k) {
            gd.iter_mut().zip(&chunk[..k * d]).for_each(|(a, b)| *a += b);
            gsig.iter_mut().zip(&chunk[k * d..]).for_each(|(a, b)| *a += b);
        }
        vec![
            needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), gq)),
            needs[2].then(|| Tensor::from_parts(vec![k, d], gd)),
            needs[3].then(|| Tensor::from_parts(vec![k], gsig)),
        ]
    }
}

impl Graph {
    /// Region features `N×D×K` from features `N×D×H×W`, assignments
    /// `N×K×H×W`, parts `K×D` and scales `K`.
    pub fn pool_regions(&mut self, features: Var, assignment: Var, parts: Var, sigmas: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let qs = self.shape(assignment).to_vec();
        let (&[n, d, h, w], &[n2, k, h2, w2]) = (&fs[..], &qs[..]) else {
            return Err(Error::shape("pool_regions", &fs, &qs));
        };
        if n != n2 || h != h2 || w != w2 || self.shape(parts) != [k, d] || self.shape(sigmas) != [k] {
            return Err(Error::shape("pool_regions", &fs, &qs));
        }
        let p = h * w;
        let x = self.value(features).data();
        let q = self.value(assignment).data();
        let dict = self.value(parts).data();
        let sig = self.value(sigmas).data();

        let mut mean = vec![0.0; n * d * k];
        let mut mass = vec![0.0; n * k];
        parallel::for_each_chunk2(&mut mean, d * k, &mut mass, k, |b, m, ms| {
            let qs = &q[b * k * p..(b + 1) * k * p];
            gemm(d, p, k, 1.0, &x[b * d * p..(b + 1) * d * p], false, qs, true, 0.0, m);
            for c in 0..k {
                ms[c] = qs[c * p..(c + 1) * p].iter().sum();
                for f in 0..d {
                    m[f * k + c] = if ms[c] > 0.0 { m[f * k + c] / ms[c] } else { 0.0 };
                }
            }
        });

        let mut raw = vec![0.0; n * d * k];
        let mut out = vec![0.0; n * d * k];
        let mut norms = vec![0.0; n * k];
        for b in 0..n {
            for c in 0..k {
                let at = |f: usize| (b * d + f) * k + c;
                for f in 0..d {
                    raw[at(f)] = (mean[at(f)] - dict[c * d + f]) / sig[c];
                }
                let norm = (0..d).map(|f| raw[at(f)] * raw[at(f)]).sum::<f64>().sqrt();
                if mass[b * k + c] >= DEGENERATE_MASS && norm >= DEGENERATE_NORM {
                    norms[b * k + c] = norm;
                    for f in 0..d {
                        out[at(f)] = raw[at(f)] / norm;
                    }
                }
            }
        }
        let op = PoolRegions {
            n,
            d,
            k,
            p,
            mass,
            mean,
            raw,
            norms,
        };
        Ok(self.apply(
            op,
            &[features, assignment, parts, sigmas],
            Tensor::from_parts(vec![n, d, k], out),
        ))
    }
}

/// Residual block of three 1×1 convolutions over the region axis.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    convs: [Conv; 3],
    norms: [BatchNorm; 3],
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        let conv = |i: usize, a: usize, b: usize, rng: &mut R| Conv::new(&format!("{name}.conv{i}"), a, b, 1, 1, false, rng);
        Self {
            convs: [conv(1, dim, width, rng), conv(2, width, width, rng), conv(3, width, dim, rng)],
            norms: [
                BatchNorm::new(&format!("{name}.bn1"), width),
                BatchNorm::new(&format!("{name}.bn2"), width),
                BatchNorm::new(&format!("{name}.bn3"), dim),
            ],
        }
    }

    /// `x` is `N×D×1×K`.
    fn forward(&mut self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            h = self.convs[i].forward(s, h)?;
            h = self.norms[i].forward(s, h)?;
            if i < 2 {
                h = s.graph.relu(h);
            }
        }
        s.graph.add(x, h)
    }

    pub fn zero_weights(&mut self) {
        self.convs.iter_mut().for_each(|c| c.weight.data_mut().fill(0.0));
    }
}

impl Parameters for Bottleneck {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for i in 0..3 {
            self.convs[i].visit(f);
            self.norms[i].visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for i in 0..3 {
            self.convs[i].visit_mut(f);
            self.norms[i].visit_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norms.iter().for_each(|n| n.visit_buffers(f));
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        for n in &mut self.norms {
            if n.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// `1×1 conv → BN → ReLU → 1×1 conv` scoring each region, then softmax.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    hidden: Conv,
    norm: BatchNorm,
    score: Conv,
}

impl AttentionBranch {
    fn new<R: Rng + ?Sized>(name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            hidden: Conv::new(&format!("{name}.conv1"), dim, width, 1, 1, false, rng),
            norm: BatchNorm::new(&format!("{name}.bn1"), width),
            score: Conv::new(&format!("{name}.conv2"), width, 1, 1, 1, true, rng),
        }
    }

    /// `z` is `N×D×1×K`; returns `N×K` attention.
    fn forward(&mut self, s: &mut Session, z: Var) -> Result<Var> {
        let (n, k) = (s.graph.shape(z)[0], s.graph.shape(z)[3]);
        let h = self.hidden.forward(s, z)?;
        let h = self.norm.forward(s, h)?;
        let h = s.graph.relu(h);
        let scores = self.score.forward(s, h)?;
        let scores = s.graph.reshape(scores, &[n, k])?;
        s.graph.softmax(scores, 1)
    }

    pub fn zero_score(&mut self) {
        self.score.weight.data_mut().fill(0.0);
        if let Some(b) = &mut self.score.bias {
            b.data_mut().fill(0.0);
        }
    }
}

impl Parameters for AttentionBranch {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(f);
        self.norm.visit(f);
        self.score.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(f);
        self.norm.visit_mut(f);
        self.score.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit_buffers(f);
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        self.norm.load_buffer(name, value)
    }
}

/// Output layout of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// One softmax classifier over `C` classes.
    Single { classes: usize },
    /// `M` independent binary heads, each with its own attention branch.
    PerAttribute(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: Heads,
    /// When false, attention is fixed to the uniform vector `1/K`.
    pub attention: bool,
}

#[derive(Clone, Debug)]
pub struct HeadParameters {
    config: HeadConfig,
    pub blocks: Vec<Bottleneck>,
    pub attention: Vec<AttentionBranch>,
    pub classifiers: Vec<Linear>,
}

/// Graph nodes produced by [`HeadParameters::forward`].
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Transformed regions, `N×D×K`.
    pub zt: Var,
    /// One `N×K` attention per head.
    pub attention: Vec<Var>,
    /// Single mode: one `N×C` node. Per-attribute mode: `M` nodes of `N×1`.
    pub logits: Vec<Var>,
}

impl HeadParameters {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::Config(format!("region dimension must be at least 2, got {}", config.dim)));
        }
        let (count, classes) = match config.heads {
            Heads::Single { classes } if classes >= 2 => (1, classes),
            Heads::Single { classes } => {
                return Err(Error::Config(format!("need at least two classes, got {classes}")))
            }
            Heads::PerAttribute(m) if m >= 1 => (m, 1),
            Heads::PerAttribute(_) => return Err(Error::Config("per-attribute mode needs M >= 1".into())),
        };
        let width = config.dim / 2;
        let blocks = (0..config.blocks)
            .map(|b| Bottleneck::new(&format!("head.block{b}"), config.dim, width, rng))
            .collect();
        // Uniform attention has no parameters.
        let attention = (0..if config.attention { count } else { 0 })
            .map(|m| AttentionBranch::new(&format!("head.attention{m}"), config.dim, width, rng))
            .collect();
        let classifiers = (0..count)
            .map(|m| Linear::new(&format!("head.classifier{m}"), config.dim, classes, rng))
            .collect();
        Ok(Self {
            config,
            blocks,
            attention,
            classifiers,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// `f_z` on `N×D×K` region features.
    pub fn transform_var(&mut self, s: &mut Session, z: Var) -> Result<Var> {
        let shape = s.graph.shape(z).to_vec();
        let &[n, d, k] = &shape[..] else {
            return Err(Error::invalid(format!("transform needs N×D×K, got {shape:?}")));
        };
        if d != self.config.dim {
            return Err(Error::shape("transform", &shape, &[self.config.dim]));
        }
        let mut h = s.graph.reshape(z, &[n, d, 1, k])?;
        for block in &mut self.blocks {
            h = block.forward(s, h)?;
        }
        s.graph.reshape(h, &[n, d, k])
    }

    /// Attention of head `head` over `N×D×K` region features.
    pub fn attend_var(&mut self, s: &mut Session, z: Var, head: usize) -> Result<Var> {
        let shape = s.graph.shape(z).to_vec();
        let &[n, d, k] = &shape[..] else {
            return Err(Error::invalid(format!("attend needs N×D×K, got {shape:?}")));
        };
        if !self.config.attention {
            return Ok(s.graph.constant(Tensor::full(&[n, k], 1.0 / k as f64)));
        }
        let z4 = s.graph.reshape(z, &[n, d, 1, k])?;
        self.attention[head].forward(s, z4)
    }

    /// Logits of head `head` from transformed regions and attention.
    pub fn classify_var(&self, s: &mut Session, zt: Var, a: Var, head: usize) -> Result<Var> {
        let pooled = s.graph.weighted_sum(zt, a)?;
        self.classifiers[head].forward(s, pooled)
    }

    /// Full head on region features `z` (`N×D×K`).
    pub fn forward(&mut self, s: &mut Session, z: Var) -> Result<HeadOutput> {
        let zt = self.transform_var(s, z)?;
        let mut attention = Vec::new();
        let mut logits = Vec::new();
        for head in 0..self.classifiers.len() {
            let a = self.attend_var(s, z, head)?;
            logits.push(self.classify_var(s, zt, a, head)?);
            attention.push(a);
        }
        Ok(HeadOutput { zt, attention, logits })
    }

    /// Probabilities from head logits: softmax in single mode, one sigmoid
    /// per head in per-attribute mode. Returns `N` rows.
    pub fn probabilities(&self, graph: &Graph, logits: &[Var]) -> Result<Vec<Vec<f64>>> {
        match self.config.heads {
            Heads::Single { .. } => {
                let p = softmax_axis(graph.value(logits[0]), 1)?;
                let c = p.shape()[1];
                Ok(p.data().chunks(c).map(|r| r.to_vec()).collect())
            }
            Heads::PerAttribute(m) => {
                let n = graph.shape(logits[0])[0];
                Ok((0..n)
                    .map(|b| (0..m).map(|h| crate::autodiff::sigmoid(graph.value(logits[h]).data()[b])).collect())
                    .collect())
            }
        }
    }
}

impl Parameters for HeadParameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_all(&self.blocks, f);
        visit_all(&self.attention, f);
        visit_all(&self.classifiers, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_all_mut(&mut self.blocks, f);
        visit_all_mut(&mut self.attention, f);
        visit_all_mut(&mut self.classifiers, f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
        self.attention.iter().for_each(|a| a.visit_buffers(f));
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        for b in &mut self.blocks {
            if b.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        for a in &mut self.attention {
            if a.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Region features of one `D×H×W` feature map.
pub fn pool_regions(features: &Tensor, map: &AssignmentMap, dict: &PartDictionary) -> Result<RegionFeatures> {
    let mut g = Graph::new();
    let x = g.constant(add_batch_axis(features)?);
    let q = g.constant(add_batch_axis(map.values())?);
    let parts = g.constant(dict.parts().clone());
    let sig = g.constant(Tensor::from_vec(dict.sigmas()));
    let z = g.pool_regions(x, q, parts, sig)?;
    Ok(RegionFeatures(g.value(z).outer(0)))
}

fn add_batch_axis(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

/// `f_z` applied to one sample's regions.
pub fn transform(z: &RegionFeatures, params: &mut HeadParameters, mode: Mode) -> Result<Tensor> {
    let mut s = Session::frozen(mode);
    let zv = s.graph.constant(add_batch_axis(&z.0)?);
    let out = params.transform_var(&mut s, zv)?;
    Ok(s.graph.value(out).outer(0))
}

/// Attention of the first head on one sample's regions.
pub fn attend(z: &RegionFeatures, params: &mut HeadParameters, mode: Mode) -> Result<AttentionVector> {
    let mut s = Session::frozen(mode);
    let zv = s.graph.constant(add_batch_axis(&z.0)?);
    let a = params.attend_var(&mut s, zv, 0)?;
    Ok(AttentionVector(s.graph.value(a).data().to_vec()))
}

/// Class probabilities (single mode) or per-head Bernoulli probabilities
/// for one sample, using one attention vector per head.
pub fn classify(zt: &Tensor, attention: &[AttentionVector], params: &HeadParameters) -> Result<Vec<f64>> {
    if attention.len() != params.classifiers.len() {
        return Err(Error::invalid(format!(
            "{} attention vectors for {} heads",
            attention.len(),
            params.classifiers.len()
        )));
    }
    let mut s = Session::frozen(Mode::Eval);
    let z = s.graph.constant(add_batch_axis(zt)?);
    let mut logits = Vec::new();
    for (h, a) in attention.iter().enumerate() {
        let av = s.graph.constant(Tensor::new(&[1, a.0.len()], a.0.clone())?);
        logits.push(params.classify_var(&mut s, z, av, h)?);
    }
    Ok(params.probabilities(&s.graph, &logits)?.remove(0))
}

/// Pixel scores `Σ_k q_ij^k a_k`.
pub fn attribute_pixels(map: &AssignmentMap, a: &AttentionVector) -> Result<AttributionMap> {
    if a.0.len() != map.parts() {
        return Err(Error::shape("attribute_pixels", map.values().shape(), &[a.0.len()]));
    }
    let (h, w) = (map.height(), map.width());
    let q = map.values().data();
    let mut out = vec![0.0; h * w];
    for (c, &ak) in a.0.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&q[c * h * w..(c + 1) * h * w]) {
            *o += v * ak;
        }
    }
    // Each score is a convex combination of the attention values; clamping
    // only removes rounding past the extremes.
    let lo = a.0.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Ok(AttributionMap(Tensor::new(&[h, w], out)?))
}
