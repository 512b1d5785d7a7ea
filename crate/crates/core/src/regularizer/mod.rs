//! Part-occurrence regularization.
//!
//! Each row of the occurrence batch `T` (`K×N`, one column per sample) is an
//! empirical sample of how strongly part `k` fires. The loss sorts every row
//! and compares it, in log space, with the prior's quantiles at the mid-rank
//! levels `(2n - 1) / 2N`: a sorted-sample estimate of the 1D Wasserstein
//! distance between the empirical and the prior occurrence distributions.
//! The log rescaling keeps the gradient `1 / (t + ε)` large for parts that
//! almost never fire, so they are still pulled towards the prior.

mod beta;

use std::collections::HashMap;

pub use beta::{BetaPrior, UnitPoint};

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    /// Stabilizer inside the logarithms. Zero gives the unstabilized loss.
    pub eps: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS }
    }
}

impl RegularizerConfig {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("regularizer eps must be >= 0, got {eps}")));
        }
        Ok(Self { eps })
    }
}

/// Prior quantile sequences, computed once per batch size.
#[derive(Clone, Debug)]
pub struct QuantileCache {
    prior: BetaPrior,
    by_count: HashMap<usize, Vec<f64>>,
}

impl QuantileCache {
    pub fn new(prior: BetaPrior) -> Self {
        Self {
            prior,
            by_count: HashMap::new(),
        }
    }

    pub fn prior(&self) -> &BetaPrior {
        &self.prior
    }

    pub fn get(&mut self, count: usize) -> Result<&[f64]> {
        if !self.by_count.contains_key(&count) {
            let q = self.prior.midrank_quantiles(count)?;
            self.by_count.insert(count, q);
        }
        Ok(&self.by_count[&count])
    }
}

fn validate_batch(shape: &[usize], data: &[f64], quantiles: &[f64]) -> Result<(usize, usize)> {
    let &[k, n] = shape else {
        return Err(Error::shape("occurrence_loss", shape, &[quantiles.len()]));
    };
    if n != quantiles.len() {
        return Err(Error::shape("occurrence_loss", shape, &[quantiles.len()]));
    }
    // Closed interval: f64 rounding turns 1 - 1e-17 into exactly 1.0.
    if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("occurrence score {bad} outside (0, 1)")));
    }
    Ok((k, n))
}

/// Indices that sort `row` ascending; ties keep their original order.
fn ascending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    idx
}

struct OccurrenceLoss {
    quantiles: Vec<f64>,
    eps: f64,
}

impl OccurrenceLoss {
    /// Loss value plus the gradient with respect to every entry.
    fn evaluate(&self, data: &[f64], k: usize, n: usize) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; data.len()];
        let mut total = 0.0;
        let log_prior: Vec<f64> = self.quantiles.iter().map(|q| (q + self.eps).ln()).collect();
        for part in 0..k {
            let row = &data[part * n..(part + 1) * n];
            let mut part_loss = 0.0;
            for (rank, &col) in ascending_order(row).iter().enumerate() {
                let diff = (row[col] + self.eps).ln() - log_prior[rank];
                part_loss += diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[part * n + col] = sign / (row[col] + self.eps) / (n * k) as f64;
            }
            total += part_loss / n as f64;
        }
        (total / k as f64, grad)
    }
}

impl Function for OccurrenceLoss {
    fn name(&self) -> &'static str {
        "occurrence_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let &[k, n] = inputs[0].shape() else { unreachable!() };
        // The forward permutation is recomputed from the same input values.
        let (_, g) = self.evaluate(inputs[0].data(), k, n);
        let scale = grad.item();
        vec![Some(Tensor::from_parts(
            vec![k, n],
            g.into_iter().map(|v| v * scale).collect(),
        ))]
    }
}

impl Graph {
    /// Log-rescaled sorted-quantile distance between each row of `batch`
    /// (`K×N`) and `quantiles` (length `N`), averaged over rows.
    pub fn occurrence_loss(&mut self, batch: Var, quantiles: &[f64], cfg: RegularizerConfig) -> Result<Var> {
        let (k, n) = validate_batch(self.shape(batch), self.value(batch).data(), quantiles)?;
        let op = OccurrenceLoss {
            quantiles: quantiles.to_vec(),
            eps: cfg.eps,
        };
        let (value, _) = op.evaluate(self.value(batch).data(), k, n);
        if !value.is_finite() {
            return Err(Error::NonFinite("occurrence loss".into()));
        }
        Ok(self.apply(op, &[batch], Tensor::scalar(value)))
    }
}

/// Value of the occurrence loss for a `K×N` batch under `prior`.
pub fn occurrence_loss(batch: &Tensor, prior: &BetaPrior, cfg: RegularizerConfig) -> Result<f64> {
    let n = batch.shape().get(1).copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("occurrence batch needs at least one sample"));
    }
    let quantiles = prior.midrank_quantiles(n)?;
    let mut g = Graph::new();
    let t = g.constant(batch.clone());
    let loss = g.occurrence_loss(t, &quantiles, cfg)?;
    Ok(g.value(loss).item())
}

/// Mean absolute difference between `row` sorted ascending and the already
/// ascending `quantiles`: the un-logged counterpart of the loss for one part.
pub fn sorted_distance(row: &[f64], quantiles: &[f64]) -> Result<f64> {
    if row.len() != quantiles.len() || row.is_empty() {
        return Err(Error::shape("sorted_distance", &[row.len()], &[quantiles.len()]));
    }
    let order = ascending_order(row);
    let total: f64 = order
        .iter()
        .zip(quantiles)
        .map(|(&i, q)| (row[i] - q).abs())
        .sum();
    Ok(total / row.len() as f64)
}

/// Exact Wasserstein-1 distance between two equally sized empirical measures
/// on the line.
pub fn wasserstein_oracle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("wasserstein_oracle", &[a.len()], &[b.len()]));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}
