//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub pass: bool,
}

/// Compares the reverse-mode gradient of `function` at `point` with central
/// differences.
///
/// `function` receives a fresh graph and the leaf holding the (possibly
/// perturbed) point, and must return a scalar node. Each coordinate's
/// central difference is Richardson-extrapolated from steps `h` and `h/2`,
/// which cancels the `h²` truncation term. The relative error per
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && tolerance > 0.0) {
        return Err(Error::invalid("grad_check step and tolerance must be positive"));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let y = function(&mut g, x)?;
        let v = g.value(y);
        if v.len() != 1 {
            return Err(Error::invalid(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone());
        let y = function(&mut g, x)?;
        if !g.value(y).item().is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        g.backward(y)?.get(x)
    };

    let mut numeric = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe.data_mut()[i] = x0;
            Ok((up - down) / (2.0 * h))
        };
        let coarse = central(step)?;
        let fine = central(step / 2.0)?;
        numeric.data_mut()[i] = (4.0 * fine - coarse) / 3.0;
    }

    let (worst_index, max_relative_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradReport {
        max_relative_error,
        worst_index,
        pass: max_relative_error <= tolerance,
        analytic,
        numeric,
    })
}
