//! Elementwise, reduction, normalization and loss operations.

use super::graph::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! unary_fn {
    ($name:ident, $label:literal, |$x:ident, $y:ident, $g:ident| $body:expr) => {
        struct $name;
        impl Function for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn backward(
                &self,
                inputs: &[&Tensor],
                output: &Tensor,
                grad: &Tensor,
                _needs: &[bool],
            ) -> Vec<Option<Tensor>> {
                let data = inputs[0]
                    .data()
                    .iter()
                    .zip(output.data())
                    .zip(grad.data())
                    .map(|((&$x, &$y), &$g)| $body)
                    .collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
            }
        }
    };
}

// ReLU subgradient at 0 is 0.
unary_fn!(Relu, "relu", |x, _y, g| if x > 0.0 { g } else { 0.0 });
unary_fn!(Sigmoid, "sigmoid", |_x, y, g| g * y * (1.0 - y));

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct Mul;

impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let da = needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b).expect("same shape"));
        let db = needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a).expect("same shape"));
        vec![da, db]
    }
}

struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        ))]
    }
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

struct Transpose;

impl Function for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [r, c] = *inputs[0].shape() else { unreachable!() };
        vec![Some(Tensor::from_parts(vec![r, c], transpose2(grad.data(), c, r)))]
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` of a raw buffer.
pub(crate) fn softmax_into(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    out
}

struct Softmax {
    axis: usize,
}

impl Function for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (outer, n, inner) = axis_split(output.shape(), self.axis);
        let y = output.data();
        let g = grad.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..n {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(output.shape().to_vec(), dx))]
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Bessel-corrected variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

struct BatchNorm {
    /// Normalized input, before scale and shift.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let spatial = shape[2..].iter().product();
    (n, c, spatial)
}

impl Function for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (n, c, s) = channel_layout(inputs[0].shape());
        let gamma = inputs[1].data();
        let g = grad.data();
        let m = (n * s) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; g.len()];
        for ch in 0..c {
            let idx = |b: usize, p: usize| (b * c + ch) * s + p;
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                for p in 0..s {
                    let i = idx(b, p);
                    sg += g[i];
                    sgx += g[i] * self.xhat[i];
                }
            }
            dgamma[ch] = sgx;
            dbeta[ch] = sg;
            let scale = gamma[ch] * self.inv_std[ch];
            for b in 0..n {
                for p in 0..s {
                    let i = idx(b, p);
                    dx[i] = if self.train {
                        scale * (g[i] - sg / m - self.xhat[i] * sgx / m)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

struct Linear {
    has_bias: bool,
}

impl Function for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        use super::linalg::gemm;
        let [n, d] = *inputs[0].shape() else { unreachable!() };
        let c = inputs[1].shape()[0];
        let g = grad.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * d];
            gemm(n, c, d, 1.0, g, false, inputs[1].data(), false, 0.0, &mut dx);
            Tensor::from_parts(vec![n, d], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; c * d];
            gemm(c, n, d, 1.0, g, true, inputs[0].data(), false, 0.0, &mut dw);
            Tensor::from_parts(vec![c, d], dw)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                Tensor::from_parts(vec![c], db)
            }));
        }
        out
    }
}

struct WeightedSum;

impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let [n, d, k] = *inputs[0].shape() else { unreachable!() };
        let z = inputs[0].data();
        let a = inputs[1].data();
        let g = grad.data();
        let dz = needs[0].then(|| {
            let mut dz = vec![0.0; n * d * k];
            for b in 0..n {
                for r in 0..d {
                    for p in 0..k {
                        dz[(b * d + r) * k + p] = g[b * d + r] * a[b * k + p];
                    }
                }
            }
            Tensor::from_parts(vec![n, d, k], dz)
        });
        let da = needs[1].then(|| {
            let mut da = vec![0.0; n * k];
            for b in 0..n {
                for r in 0..d {
                    for p in 0..k {
                        da[b * k + p] += g[b * d + r] * z[(b * d + r) * k + p];
                    }
                }
            }
            Tensor::from_parts(vec![n, k], da)
        });
        vec![dz, da]
    }
}

struct CrossEntropy {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl Function for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c] = *inputs[0].shape() else { unreachable!() };
        let scale = grad.item() / n as f64;
        let mut dx = self.probs.clone();
        for (b, &label) in self.labels.iter().enumerate() {
            dx[b * c + label] -= 1.0;
        }
        dx.iter_mut().for_each(|v| *v *= scale);
        vec![Some(Tensor::from_parts(vec![n, c], dx))]
    }
}

struct BceWithLogits {
    targets: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Function for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let scale = grad.item() / self.targets.len() as f64;
        let dx = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&l, &t)| (sigmoid(l) - t) * scale)
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.apply(Add, &[a, b], value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.apply(Mul, &[a, b], value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.apply(Scale(factor), &[a], value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.apply(Sum, &[a], value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.apply(Relu, &[a], value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.apply(Sigmoid, &[a], value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.apply(Reshape, &[a], value))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = *self.shape(a) else {
            return Err(Error::shape("transpose", self.shape(a), &[0, 0]));
        };
        let value = Tensor::from_parts(vec![c, r], transpose2(self.value(a).data(), r, c));
        Ok(self.apply(Transpose, &[a], value))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let value = Tensor::from_parts(shape.clone(), softmax_into(self.value(a).data(), &shape, axis));
        Ok(self.apply(Softmax { axis }, &[a], value))
    }

    /// Per-channel normalization of `x` (`N×C×…`).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (n, c, s) = channel_layout(&shape);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let m = n * s;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..n).flat_map(move |b| (0..s).map(move |p| (b * c + ch) * s + p));
                    let mu = vals().map(|i| xs[i]).sum::<f64>() / m as f64;
                    let v = vals().map(|i| (xs[i] - mu).powi(2)).sum::<f64>() / m as f64;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                let bessel = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * bessel).collect(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, (&v, (h, o))) in xs.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / s) % c;
            *h = (v - mean[ch]) * inv_std[ch];
            *o = gamma_v[ch] * *h + beta_v[ch];
        }
        let op = BatchNorm {
            xhat,
            inv_std,
            train: stats.is_some(),
        };
        let y = self.apply(op, &[x, gamma, beta], Tensor::from_parts(shape, out));
        Ok((y, stats))
    }

    /// `x` (`N×D`) times `weightᵀ` (`weight` is `C×D`) plus bias.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (&[n, d], &[c, d2]) = (self.shape(x), self.shape(weight)) else {
            return Err(Error::shape("linear", self.shape(x), self.shape(weight)));
        };
        if d != d2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(Error::shape("linear bias", self.shape(b), &[c]));
            }
        }
        let mut out = vec![0.0; n * c];
        super::linalg::gemm(n, d, c, 1.0, self.value(x).data(), false, self.value(weight).data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.apply(
            Linear {
                has_bias: bias.is_some(),
            },
            &inputs,
            Tensor::from_parts(vec![n, c], out),
        ))
    }

    /// Per-sample `z[n] · a[n]` for `z` of shape `N×D×K` and `a` of shape `N×K`.
    pub fn weighted_sum(&mut self, z: Var, a: Var) -> Result<Var> {
        let (&[n, d, k], &[n2, k2]) = (self.shape(z), self.shape(a)) else {
            return Err(Error::shape("weighted_sum", self.shape(z), self.shape(a)));
        };
        if n != n2 || k != k2 {
            return Err(Error::shape("weighted_sum", self.shape(z), self.shape(a)));
        }
        let zv = self.value(z).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for r in 0..d {
                out[b * d + r] = (0..k).map(|p| zv[(b * d + r) * k + p] * av[b * k + p]).sum();
            }
        }
        Ok(self.apply(WeightedSum, &[z, a], Tensor::from_parts(vec![n, d], out)))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits` (`N×C`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, c] = self.shape(logits) else {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        };
        if n != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let probs = softmax_into(self.value(logits).data(), &[n, c], 1);
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * c..(b + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let op = CrossEntropy {
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.apply(op, &[logits], Tensor::scalar(loss / n as f64)))
    }

    /// Mean binary cross-entropy of `targets` under `sigmoid(logits)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &t)| softplus(l) - t * l)
            .sum::<f64>()
            / targets.len() as f64;
        let op = BceWithLogits {
            targets: targets.to_vec(),
        };
        Ok(self.apply(op, &[logits], Tensor::scalar(loss)))
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("softmax axis {axis} for shape {:?}", x.shape())));
    }
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        softmax_into(x.data(), x.shape(), axis),
    ))
}

