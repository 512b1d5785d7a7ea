//! Soft part assignment, assignment smoothing and part-occurrence detection.
//!
//! Every pixel feature `x_ij` is compared with each dictionary part `d_k`
//! under a per-part scale `σ_k`:
//!
//! ```text
//! q_ij^k = softmax_k( -‖(x_ij - d_k) / σ_k‖² / 2 )
//! ```
//!
//! A part's occurrence score is the spatial maximum of its assignment
//! channel after a small Gaussian blur, which suppresses isolated pixels.

use rand::Rng;

use crate::autodiff::{sigmoid, Function, Graph, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// The learnable parts `d_k` (`K×D`) and their unconstrained smoothing
/// parameters, mapped to `σ_k ∈ (0, 1)` by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct PartDictionary {
    parts: Tensor,
    raw_smoothing: Tensor,
}

impl PartDictionary {
    pub fn new(parts: Tensor, raw_smoothing: Tensor) -> Result<Self> {
        let &[k, d] = parts.shape() else {
            return Err(Error::shape("PartDictionary", parts.shape(), raw_smoothing.shape()));
        };
        if raw_smoothing.shape() != [k] || k == 0 || d == 0 {
            return Err(Error::shape("PartDictionary", parts.shape(), raw_smoothing.shape()));
        }
        Ok(Self {
            parts,
            raw_smoothing,
        })
    }

    /// Parts drawn from N(0, 2/D); every `σ_k` starts at 0.5.
    pub fn init<R: Rng + ?Sized>(parts: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            parts: Tensor::randn(&[parts, dim], (2.0 / dim as f64).sqrt(), rng),
            raw_smoothing: Tensor::zeros(&[parts]),
        }
    }

    /// Dictionary with explicit `σ_k` values, each strictly inside (0, 1).
    pub fn with_sigmas(parts: Tensor, sigmas: &[f64]) -> Result<Self> {
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::invalid(format!("smoothing factor {s} outside (0, 1)")));
        }
        let raw = sigmas.iter().map(|s| (s / (1.0 - s)).ln()).collect();
        Self::new(parts, Tensor::from_vec(raw))
    }

    pub fn parts(&self) -> &Tensor {
        &self.parts
    }

    pub fn raw_smoothing(&self) -> &Tensor {
        &self.raw_smoothing
    }

    pub fn parts_mut(&mut self) -> &mut Tensor {
        &mut self.parts
    }

    pub fn raw_smoothing_mut(&mut self) -> &mut Tensor {
        &mut self.raw_smoothing
    }

    pub fn len(&self) -> usize {
        self.parts.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.parts.shape()[1]
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.raw_smoothing.data().iter().map(|&r| sigmoid(r)).collect()
    }
}

/// Per-pixel distribution over the `K` parts (`K×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap(Tensor);

impl AssignmentMap {
    /// Wraps a `K×H×W` tensor whose per-pixel columns sum to one.
    pub fn new(values: Tensor) -> Result<Self> {
        let &[k, h, w] = values.shape() else {
            return Err(Error::invalid(format!("assignment map must be K×H×W, got {:?}", values.shape())));
        };
        let v = values.data();
        for p in 0..h * w {
            let total: f64 = (0..k).map(|c| v[c * h * w + p]).sum();
            if (total - 1.0).abs() > 1e-8 || (0..k).any(|c| v[c * h * w + p] < 0.0) {
                return Err(Error::invalid(format!("pixel {p} is not a distribution (sum {total})")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn parts(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Normalized square Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingKernel {
    size: usize,
    bandwidth: f64,
    weights: Vec<f64>,
}

impl Default for SmoothingKernel {
    fn default() -> Self {
        Self::gaussian(3, 1.0).expect("valid default kernel")
    }
}

impl SmoothingKernel {
    pub fn gaussian(size: usize, bandwidth: f64) -> Result<Self> {
        if size % 2 == 0 || !(bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "kernel size must be odd and bandwidth positive, got {size} / {bandwidth}"
            )));
        }
        let r = (size / 2) as f64;
        let mut weights: Vec<f64> = (0..size * size)
            .map(|i| {
                let u = (i / size) as f64 - r;
                let v = (i % size) as f64 - r;
                (-(u * u + v * v) / (2.0 * bandwidth * bandwidth)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            size,
            bandwidth,
            weights,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// In-image kernel mass at every output pixel of an `h×w` plane.
    fn border_mass(&self, h: usize, w: usize) -> Vec<f64> {
        let r = self.size / 2;
        let mut mass = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut m = 0.0;
                for u in 0..self.size {
                    for v in 0..self.size {
                        let (y, x) = (i + u, j + v);
                        if y >= r && x >= r && y - r < h && x - r < w {
                            m += self.weights[u * self.size + v];
                        }
                    }
                }
                mass[i * w + j] = m;
            }
        }
        mass
    }

    /// Blurs one `h×w` plane with border renormalization.
    fn apply_plane(&self, src: &[f64], dst: &mut [f64], mass: &[f64], h: usize, w: usize) {
        let r = self.size / 2;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..self.size {
                    for v in 0..self.size {
                        let (y, x) = (i + u, j + v);
                        if y >= r && x >= r && y - r < h && x - r < w {
                            acc += self.weights[u * self.size + v] * src[(y - r) * w + (x - r)];
                        }
                    }
                }
                dst[i * w + j] = acc / mass[i * w + j];
            }
        }
    }

    /// Adjoint of [`Self::apply_plane`].
    fn adjoint_plane(&self, grad: &[f64], dst: &mut [f64], mass: &[f64], h: usize, w: usize) {
        let r = self.size / 2;
        dst.fill(0.0);
        for i in 0..h {
            for j in 0..w {
                let g = grad[i * w + j] / mass[i * w + j];
                for u in 0..self.size {
                    for v in 0..self.size {
                        let (y, x) = (i + u, j + v);
                        if y >= r && x >= r && y - r < h && x - r < w {
                            dst[(y - r) * w + (x - r)] += self.weights[u * self.size + v] * g;
                        }
                    }
                }
            }
        }
    }
}

/// Dimensions of a batched assignment: samples, dim, parts, pixels.
#[derive(Clone, Copy)]
struct AssignDims {
    n: usize,
    d: usize,
    k: usize,
    p: usize,
}

struct Assign {
    dims: AssignDims,
}

fn assign_forward(x: &[f64], parts: &[f64], sigmas: &[f64], dims: AssignDims) -> Vec<f64> {
    let AssignDims { n, d, k, p } = dims;
    let mut q = vec![0.0; n * k * p];
    let inv_two_var: Vec<f64> = sigmas.iter().map(|s| 0.5 / (s * s)).collect();
    parallel::for_each_chunk(&mut q, k * p, |b, qs| {
        let xs = &x[b * d * p..(b + 1) * d * p];
        let mut logits = vec![0.0; k];
        for pix in 0..p {
            for (c, l) in logits.iter_mut().enumerate() {
                let dist: f64 = (0..d)
                    .map(|f| {
                        let diff = xs[f * p + pix] - parts[c * d + f];
                        diff * diff
                    })
                    .sum();
                *l = -dist * inv_two_var[c];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                qs[c * p + pix] = e;
                total += e;
            }
            for c in 0..k {
                qs[c * p + pix] /= total;
            }
        }
    });
    q
}

impl Function for Assign {
    fn name(&self) -> &'static str {
        "assign"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let AssignDims { n, d, k, p } = self.dims;
        let x = inputs[0].data();
        let parts = inputs[1].data();
        let sigmas = inputs[2].data();
        let q = output.data();
        let gq = grad.data();
        let inv_var: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();

        let mut gx = vec![0.0; n * d * p];
        // Per-sample partial gradients for the shared dictionary and scales.
        let mut gshared = vec![0.0; n * (k * d + k)];
        parallel::for_each_chunk2(&mut gx, d * p, &mut gshared, k * d + k, |b, gxs, gsh| {
            let xs = &x[b * d * p..(b + 1) * d * p];
            let qs = &q[b * k * p..(b + 1) * k * p];
            let gqs = &gq[b * k * p..(b + 1) * k * p];
            let (gparts, gsig) = gsh.split_at_mut(k * d);
            let mut gl = vec![0.0; k];
            for pix in 0..p {
                let dot: f64 = (0..k).map(|c| qs[c * p + pix] * gqs[c * p + pix]).sum();
                for (c, g) in gl.iter_mut().enumerate() {
                    *g = qs[c * p + pix] * (gqs[c * p + pix] - dot);
                }
                for c in 0..k {
                    if gl[c] == 0.0 {
                        continue;
                    }
                    let w = gl[c] * inv_var[c];
                    let mut dist = 0.0;
                    for f in 0..d {
                        let diff = xs[f * p + pix] - parts[c * d + f];
                        dist += diff * diff;
                        gxs[f * p + pix] -= w * diff;
                        gparts[c * d + f] += w * diff;
                    }
                    gsig[c] += gl[c] * dist * inv_var[c] / sigmas[c];
                }
            }
        });
        let mut gparts = vec![0.0; k * d];
        let mut gsig = vec![0.0; k];
        for chunk in gshared.chunks(k * d + k) {
            gparts.iter_mut().zip(&chunk[..k * d]).for_each(|(a, b)| *a += b);
            gsig.iter_mut().zip(&chunk[k * d..]).for_each(|(a, b)| *a += b);
        }
        vec![
            needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(vec![k, d], gparts)),
            needs[2].then(|| Tensor::from_parts(vec![k], gsig)),
        ]
    }
}

struct Smooth {
    kernel: SmoothingKernel,
    mass: Vec<f64>,
    h: usize,
    w: usize,
}

impl Function for Smooth {
    fn name(&self) -> &'static str {
        "smooth"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let plane = self.h * self.w;
        let mut dq = vec![0.0; inputs[0].len()];
        parallel::for_each_chunk(&mut dq, plane, |i, dst| {
            self.kernel
                .adjoint_plane(&grad.data()[i * plane..(i + 1) * plane], dst, &self.mass, self.h, self.w);
        });
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dq))]
    }
}

struct SpatialMax {
    argmax: Vec<usize>,
    plane: usize,
}

impl Function for SpatialMax {
    fn name(&self) -> &'static str {
        "spatial_max"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; inputs[0].len()];
        for (i, (&at, &g)) in self.argmax.iter().zip(grad.data()).enumerate() {
            dx[i * self.plane + at] = g;
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
    }
}

/// First row-major index of the maximum.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Graph {
    /// Soft assignment of `features` (`N×D×H×W`) to `parts` (`K×D`) with
    /// scales `sigmas` (`K`), giving `N×K×H×W`.
    pub fn assign(&mut self, features: Var, parts: Var, sigmas: Var) -> Result<Var> {
        let fshape = self.shape(features).to_vec();
        let &[n, d, h, w] = &fshape[..] else {
            return Err(Error::shape("assign", &fshape, self.shape(parts)));
        };
        let &[k, d2] = self.shape(parts) else {
            return Err(Error::shape("assign", &fshape, self.shape(parts)));
        };
        if d != d2 || self.shape(sigmas) != [k] {
            return Err(Error::shape("assign", &fshape, self.shape(parts)));
        }
        let dims = AssignDims { n, d, k, p: h * w };
        let q = assign_forward(
            self.value(features).data(),
            self.value(parts).data(),
            self.value(sigmas).data(),
            dims,
        );
        Ok(self.apply(
            Assign { dims },
            &[features, parts, sigmas],
            Tensor::from_parts(vec![n, k, h, w], q),
        ))
    }

    /// Blurs each `H×W` plane of a rank-3 or rank-4 tensor with `kernel`.
    pub fn smooth(&mut self, maps: Var, kernel: &SmoothingKernel) -> Result<Var> {
        let shape = self.shape(maps).to_vec();
        if shape.len() < 3 {
            return Err(Error::invalid(format!("smooth needs …×H×W, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if kernel.size > h.min(w) {
            return Err(Error::invalid(format!(
                "kernel size {} exceeds map extent {h}×{w}",
                kernel.size
            )));
        }
        let mass = kernel.border_mass(h, w);
        let plane = h * w;
        let src = self.value(maps).data();
        let mut out = vec![0.0; src.len()];
        parallel::for_each_chunk(&mut out, plane, |i, dst| {
            kernel.apply_plane(&src[i * plane..(i + 1) * plane], dst, &mass, h, w);
        });
        let op = Smooth {
            kernel: kernel.clone(),
            mass,
            h,
            w,
        };
        Ok(self.apply(op, &[maps], Tensor::from_parts(shape, out)))
    }

    /// Spatial maximum of every `H×W` plane: `…×H×W → …`.
    pub fn spatial_max(&mut self, maps: Var) -> Result<Var> {
        let shape = self.shape(maps).to_vec();
        if shape.len() < 3 {
            return Err(Error::invalid(format!("spatial_max needs …×H×W, got {shape:?}")));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let src = self.value(maps).data();
        let argmax: Vec<usize> = src.chunks(plane).map(argmax_first).collect();
        let values = argmax
            .iter()
            .enumerate()
            .map(|(i, &a)| src[i * plane + a])
            .collect();
        let out_shape = shape[..shape.len() - 2].to_vec();
        Ok(self.apply(
            SpatialMax { argmax, plane },
            &[maps],
            Tensor::from_parts(out_shape, values),
        ))
    }

    /// Adds the dictionary to the graph as `(parts, sigmas)` leaves.
    pub fn dictionary(&mut self, dict: &PartDictionary) -> (Var, Var, Var) {
        let parts = self.leaf(dict.parts.clone());
        let raw = self.leaf(dict.raw_smoothing.clone());
        let sigmas = self.sigmoid(raw);
        (parts, raw, sigmas)
    }
}

/// Assignment map of one `D×H×W` feature map.
pub fn assign(features: &Tensor, dict: &PartDictionary) -> Result<AssignmentMap> {
    let &[d, h, w] = features.shape() else {
        return Err(Error::shape("assign", features.shape(), dict.parts.shape()));
    };
    if d != dict.dim() {
        return Err(Error::shape("assign", features.shape(), dict.parts.shape()));
    }
    let dims = AssignDims {
        n: 1,
        d,
        k: dict.len(),
        p: h * w,
    };
    let q = assign_forward(features.data(), dict.parts.data(), &dict.sigmas(), dims);
    Ok(AssignmentMap(Tensor::from_parts(vec![dict.len(), h, w], q)))
}

/// Border-renormalized blur of every channel of `map`.
pub fn smooth(map: &AssignmentMap, kernel: &SmoothingKernel) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(map.0.clone());
    let s = g.smooth(q, kernel)?;
    Ok(g.value(s).clone())
}

/// Occurrence scores `t_k`: the spatial maximum of each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceVector(pub Vec<f64>);

pub fn occurrence(smoothed: &Tensor) -> Result<OccurrenceVector> {
    if smoothed.rank() != 3 {
        return Err(Error::invalid(format!("occurrence needs K×H×W, got {:?}", smoothed.shape())));
    }
    let plane = smoothed.shape()[1] * smoothed.shape()[2];
    Ok(OccurrenceVector(
        smoothed
            .data()
            .chunks(plane)
            .map(|c| c[argmax_first(c)])
            .collect(),
    ))
}
