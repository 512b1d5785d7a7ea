//! Named layers shared by the backbone and the region head.
//!
//! Layers own plain tensors. A forward pass binds them as leaves on a
//! [`Session`] graph under their names, so the trainer can match gradients
//! back to parameters after `backward`.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, NormMode, Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph plus the parameter leaves bound on it.
pub struct Session {
    pub graph: Graph,
    pub mode: Mode,
    params: Vec<(String, Var)>,
    /// When false, parameters are bound as constants.
    track: bool,
}

impl Session {
    pub fn new(mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            params: Vec::new(),
            track: true,
        }
    }

    /// A session that records no parameter gradients (inference).
    pub fn frozen(mode: Mode) -> Self {
        Self {
            track: false,
            ..Self::new(mode)
        }
    }

    pub fn bind(&mut self, name: &str, value: &Tensor) -> Var {
        if self.track {
            let v = self.graph.leaf(value.clone());
            self.params.push((name.to_string(), v));
            v
        } else {
            self.graph.constant(value.clone())
        }
    }

    /// Runs `f` on a frozen session over an existing graph.
    pub fn scoped<T>(graph: &mut Graph, mode: Mode, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let mut s = Session::frozen(mode);
        s.graph = std::mem::take(graph);
        let out = f(&mut s);
        *graph = s.graph;
        out
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Backpropagates from `output` and returns gradients keyed by name.
    pub fn gradients(&self, output: Var) -> Result<HashMap<String, Tensor>> {
        let mut grads: Gradients = self.graph.backward(output)?;
        Ok(self
            .params
            .iter()
            .map(|(name, v)| (name.clone(), grads.take(*v)))
            .collect())
    }
}

/// Visitor over named tensors, used for updates and checkpoints.
pub trait Parameters {
    /// Trainable tensors.
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
    /// Non-trainable state such as running statistics.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor)) {}
    fn load_buffer(&mut self, _name: &str, _value: &Tensor) -> Result<bool> {
        Ok(false)
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        self.visit_buffers(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Restores every trainable tensor and any buffers present in `state`.
    fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit_mut(&mut |n, t| match map.get(n) {
            Some(v) if v.shape() == t.shape() => *t = (*v).clone(),
            Some(v) => {
                err.get_or_insert(Error::shape("load_state", t.shape(), v.shape()));
            }
            None => {
                err.get_or_insert(Error::Format(format!("checkpoint lacks parameter {n}")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut names = std::collections::HashSet::new();
        self.visit(&mut |n, _| {
            names.insert(n.to_string());
        });
        for (n, t) in state.iter().filter(|(n, _)| !names.contains(n)) {
            if !self.load_buffer(n, t)? {
                return Err(Error::Format(format!("unknown checkpoint entry {n}")));
            }
        }
        Ok(())
    }
}

/// He-normal initialized convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            name: name.to_string(),
            weight: Tensor::randn(&[c_out, c_in, k, k], std, rng),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.bind(&format!("{}.weight", self.name), &self.weight);
        let b = self.bias.as_ref().map(|b| s.bind(&format!("{}.bias", self.name), b));
        s.graph.conv2d(x, w, b, self.stride, Padding::Same)
    }
}

impl Parameters for Conv {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
}

/// Batch normalization with running estimates.
///
/// The running statistics stay `None` until the first training batch, so
/// evaluating an untrained layer is an error rather than a silent identity.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: None,
            running_var: None,
        }
    }

    /// Normalizes `x`; in training mode also folds the batch statistics
    /// into the running estimates.
    pub fn forward(&mut self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.bind(&format!("{}.gamma", self.name), &self.gamma);
        let b = s.bind(&format!("{}.beta", self.name), &self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, g, b, NormMode::Train, BN_EPS)?;
                let stats = stats.expect("training mode yields statistics");
                let c = stats.mean.len();
                let mean = self.running_mean.get_or_insert_with(|| Tensor::zeros(&[c]));
                for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let var = self.running_var.get_or_insert_with(|| Tensor::full(&[c], 1.0));
                for (r, v) in var.data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let (Some(mean), Some(var)) = (&self.running_mean, &self.running_var) else {
                    return Err(Error::Untrained(format!("{} has no running statistics", self.name)));
                };
                let mode = NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(s.graph.batch_norm(x, g, b, mode, BN_EPS)?.0)
            }
        }
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let (Some(m), Some(v)) = (&self.running_mean, &self.running_var) {
            f(&format!("{}.running_mean", self.name), m);
            f(&format!("{}.running_var", self.name), v);
        }
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        let slot = if name == format!("{}.running_mean", self.name) {
            &mut self.running_mean
        } else if name == format!("{}.running_var", self.name) {
            &mut self.running_var
        } else {
            return Ok(false);
        };
        if value.shape() != self.gamma.shape() {
            return Err(Error::shape("load_buffer", self.gamma.shape(), value.shape()));
        }
        *slot = Some(value.clone());
        Ok(true)
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            name: name.to_string(),
            weight: Tensor::uniform(&[d_out, d_in], -bound, bound, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.bind(&format!("{}.weight", self.name), &self.weight);
        let b = s.bind(&format!("{}.bias", self.name), &self.bias);
        s.graph.linear(x, w, Some(b))
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Visits a list of children in order.
pub(crate) fn visit_all<P: Parameters>(items: &[P], f: &mut dyn FnMut(&str, &Tensor)) {
    items.iter().for_each(|p| p.visit(f));
}

pub(crate) fn visit_all_mut<P: Parameters>(items: &mut [P], f: &mut dyn FnMut(&str, &mut Tensor)) {
    items.iter_mut().for_each(|p| p.visit_mut(f));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn untrained_batch_norm_refuses_eval() {
        let mut bn = BatchNorm::new("bn", 2);
        let mut s = Session::new(Mode::Eval);
        let x = s.graph.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(bn.forward(&mut s, x), Err(Error::Untrained(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::new("bn", 1);
        let mut s = Session::new(Mode::Train);
        let x = s.graph.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut s, x).unwrap();
        assert!((bn.running_mean.as_ref().unwrap().item() - 0.2).abs() < 1e-15);
        // Unbiased variance of {1, 3} is 2.
        assert!((bn.running_var.as_ref().unwrap().item() - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gradients_are_keyed_by_name() {
        let lin = Linear::new("fc", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut s = Session::new(Mode::Train);
        let x = s.graph.constant(Tensor::full(&[1, 3], 1.0));
        let y = lin.forward(&mut s, x).unwrap();
        let l = s.graph.sum(y);
        let grads = s.gradients(l).unwrap();
        assert_eq!(grads["fc.bias"].data(), &[1.0, 1.0]);
        assert_eq!(grads["fc.weight"].data(), &[1.0; 6]);
    }

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm::new("bn", 2);
        bn.running_mean = Some(Tensor::from_vec(vec![0.5, 0.25]));
        bn.running_var = Some(Tensor::from_vec(vec![2.0, 3.0]));
        bn.gamma = Tensor::randn(&[2], 1.0, &mut rng);
        let state = bn.state();
        let mut fresh = BatchNorm::new("bn", 2);
        fresh.load_state(&state).unwrap();
        assert_eq!(fresh.state(), state);

        let mut other = BatchNorm::new("bn", 3);
        assert!(other.load_state(&state).is_err());
    }
}
