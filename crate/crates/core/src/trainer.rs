//! Mini-batch SGD on classification plus occurrence regularization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::head::Heads;
use crate::model::Model;
use crate::nn::{Mode, Parameters, Session};
use crate::regularizer::{BetaPrior, QuantileCache, RegularizerConfig};
use crate::synthetic::Sample;
use crate::tensor::{read_dump, write_dump, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub w_cls: f64,
    pub w_reg: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub seed: u64,
    pub hflip: bool,
    /// Maximum random translation in pixels (0 disables).
    pub crop: usize,
    /// Fraction of the epochs after which the learning rate drops tenfold.
    pub decay_at: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 40,
            w_cls: 1.0,
            w_reg: 0.1,
            alpha: 1.0,
            beta: 1e-3,
            eps: crate::regularizer::DEFAULT_EPS,
            seed: 0,
            hflip: true,
            crop: 0,
            decay_at: 2.0 / 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight decay be >= 0".into());
        }
        if !(self.w_cls >= 0.0 && self.w_reg >= 0.0) {
            return bad(format!("loss weights ({}, {}) must be >= 0", self.w_cls, self.w_reg));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.w_reg > 0.0 && self.batch_size < 2 {
            return bad("the occurrence regularizer needs batches of at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return bad(format!("decay_at {} outside [0, 1]", self.decay_at));
        }
        BetaPrior::new(self.alpha, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        RegularizerConfig::new(self.eps).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decay = (self.decay_at * self.epochs as f64).ceil() as usize;
        if epoch >= decay && self.decay_at < 1.0 {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// Row-major `N×M` binary targets.
    Attributes(&'a [f64]),
}

/// Binary attributes of a sample: one bit per class, then the presence of
/// every part after the first.
pub fn attributes(sample: &Sample, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| (sample.label == c) as u8 as f64)
        .chain(sample.presence[1..].iter().map(|&p| p as u8 as f64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// `w_cls · classification + w_reg · occurrence` on the graph.
///
/// `logits` follows [`HeadOutput`](crate::head::HeadOutput); `occurrence`
/// is `N×K`. Returns `(total, classification, regularizer)` nodes.
pub fn total_loss_var(
    g: &mut Graph,
    logits: &[Var],
    targets: Targets<'_>,
    occurrence: Var,
    quantiles: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var)> {
    let cls = match targets {
        Targets::Classes(labels) => {
            if logits.len() != 1 {
                return Err(Error::invalid("class targets need a single head"));
            }
            g.cross_entropy(logits[0], labels)?
        }
        Targets::Attributes(t) => {
            let m = logits.len();
            let n = g.shape(logits[0])[0];
            if t.len() != n * m {
                return Err(Error::shape("attribute targets", &[n, m], &[t.len()]));
            }
            let mut sum = None;
            for (h, &l) in logits.iter().enumerate() {
                let col: Vec<f64> = (0..n).map(|b| t[b * m + h]).collect();
                let bce = g.bce_with_logits(l, &col)?;
                sum = Some(match sum {
                    None => bce,
                    Some(s) => g.add(s, bce)?,
                });
            }
            let s = sum.ok_or_else(|| Error::invalid("no heads"))?;
            g.scale(s, 1.0 / m as f64)
        }
    };
    let reg = match quantiles {
        Some(q) if cfg.w_reg > 0.0 => {
            let kn = g.transpose(occurrence)?;
            g.occurrence_loss(kn, q, RegularizerConfig::new(cfg.eps)?)?
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };
    let a = g.scale(cls, cfg.w_cls);
    let b = g.scale(reg, cfg.w_reg);
    let total = g.add(a, b)?;
    Ok((total, cls, reg))
}

/// Loss on plain tensors: `logits` is `N×C` (or `N×M` attribute logits),
/// `occurrence` is `K×N`.
pub fn total_loss(logits: &Tensor, targets: Targets<'_>, occurrence: &Tensor, prior: &BetaPrior, cfg: &TrainConfig) -> Result<LossParts> {
    let mut g = Graph::new();
    let heads: Vec<Var> = match targets {
        Targets::Classes(_) => vec![g.constant(logits.clone())],
        Targets::Attributes(_) => {
            let &[n, m] = logits.shape() else {
                return Err(Error::invalid("attribute logits must be N×M"));
            };
            (0..m)
                .map(|h| {
                    let col = (0..n).map(|b| logits.data()[b * m + h]).collect();
                    g.constant(Tensor::from_parts(vec![n, 1], col))
                })
                .collect()
        }
    };
    let &[_, n] = occurrence.shape() else {
        return Err(Error::invalid("occurrence batch must be K×N"));
    };
    let occ = g.constant(occurrence.clone());
    let occ = g.transpose(occ)?;
    let quantiles = prior.midrank_quantiles(n)?;
    let (t, c, r) = total_loss_var(&mut g, &heads, targets, occ, Some(&quantiles), cfg)?;
    Ok(LossParts {
        total: g.value(t).item(),
        cls: g.value(c).item(),
        reg: g.value(r).item(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,loss,cls_loss,reg_loss,accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{}", e.epoch, e.loss, e.cls_loss, e.reg_loss, e.accuracy).unwrap();
        }
        s
    }
}

/// Batch sample augmented per the config.
fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Tensor {
    // Draw both variates unconditionally so flags do not shift the stream.
    let flip = rng.random::<bool>();
    let (dy, dx) = (rng.random_range(-1.0..1.0f64), rng.random_range(-1.0..1.0f64));
    let mut img = if cfg.hflip && flip {
        sample.hflip().image
    } else {
        sample.image.clone()
    };
    if cfg.crop > 0 {
        let r = cfg.crop as f64;
        img = translate(&img, (dy * r).round() as isize, (dx * r).round() as isize);
    }
    img
}

/// Shifts a `C×H×W` image by `(dy, dx)`, replicating edge pixels.
fn translate(img: &Tensor, dy: isize, dx: isize) -> Tensor {
    let &[c, h, w] = img.shape() else { unreachable!("images are C×H×W") };
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = (i as isize - dy).clamp(0, h as isize - 1) as usize;
            for j in 0..w {
                let sj = (j as isize - dx).clamp(0, w as isize - 1) as usize;
                out[(ch * h + i) * w + j] = src[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

fn batch_accuracy(g: &Graph, logits: &[Var], targets: Targets<'_>) -> usize {
    match targets {
        Targets::Classes(labels) => {
            let v = g.value(logits[0]);
            let c = v.shape()[1];
            v.data()
                .chunks(c)
                .zip(labels)
                .filter(|(row, &l)| crate::grouping::argmax_first(row) == l)
                .count()
        }
        Targets::Attributes(t) => {
            // A sample counts as correct when every head is right.
            let m = logits.len();
            let n = g.shape(logits[0])[0];
            (0..n)
                .filter(|&b| (0..m).all(|h| (g.value(logits[h]).data()[b] > 0.0) == (t[b * m + h] > 0.5)))
                .count()
        }
    }
}

/// SGD state: one velocity buffer per parameter.
struct Optimizer {
    velocity: HashMap<String, Tensor>,
}

impl Optimizer {
    fn step(&mut self, model: &mut Model, grads: &HashMap<String, Tensor>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let mut missing = None;
        model.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for ((p, v), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
        });
        match missing {
            Some(n) => Err(Error::invalid(format!("no gradient for parameter {n}"))),
            None => Ok(()),
        }
    }
}

/// Trains `model` in place and returns per-epoch metrics.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} samples is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let heads = model.config().heads;
    let classes = data.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let prior = BetaPrior::new(cfg.alpha, cfg.beta)?;
    let mut cache = QuantileCache::new(prior);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Optimizer {
        velocity: HashMap::new(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len() / cfg.batch_size;
    let mut log = MetricsLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let (mut loss_sum, mut cls_sum, mut reg_sum, mut correct) = (0.0, 0.0, 0.0, 0);
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images: Vec<Tensor> = idx.iter().map(|&i| augment(&data[i], cfg, &mut rng)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
            let attrs: Vec<f64>;
            let targets = match heads {
                Heads::Single { .. } => Targets::Classes(&labels),
                Heads::PerAttribute(m) => {
                    attrs = idx
                        .iter()
                        .flat_map(|&i| attributes(&data[i], classes).into_iter().take(m))
                        .collect();
                    if attrs.len() != m * idx.len() {
                        return Err(Error::Config(format!("samples carry fewer than {m} attributes")));
                    }
                    Targets::Attributes(&attrs)
                }
            };

            let mut s = Session::new(Mode::Train);
            let x = s.graph.constant(Tensor::stack(&images)?);
            let f = model.forward(&mut s, x)?;
            let finite_out = s.graph.value(f.occurrence).all_finite()
                && f.head.logits.iter().all(|&l| s.graph.value(l).all_finite());
            if !finite_out {
                return Err(Error::NumericalAbort { epoch, batch: b });
            }
            let quantiles = if cfg.w_reg > 0.0 {
                Some(cache.get(cfg.batch_size)?.to_vec())
            } else {
                None
            };
            let (total, cls, reg) =
                total_loss_var(&mut s.graph, &f.head.logits, targets, f.occurrence, quantiles.as_deref(), cfg)?;
            let loss = s.graph.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NumericalAbort { epoch, batch: b });
            }
            loss_sum += loss;
            cls_sum += s.graph.value(cls).item();
            reg_sum += s.graph.value(reg).item();
            correct += batch_accuracy(&s.graph, &f.head.logits, targets);

            let grads = s.gradients(total)?;
            opt.step(model, &grads, lr, cfg)?;
            let mut finite = true;
            model.visit(&mut |_, t| finite &= t.all_finite());
            if !finite {
                return Err(Error::NumericalAbort { epoch, batch: b });
            }
        }
        let nb = batches as f64;
        log.epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / nb,
            cls_loss: cls_sum / nb,
            reg_loss: reg_sum / nb,
            accuracy: correct as f64 / (batches * cfg.batch_size) as f64,
        });
    }
    Ok(log)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    write_dump(out, &model.state())
}

pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<()> {
    let state = read_dump(BufReader::new(File::open(path)?))?;
    model.load_state(&state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::synthetic::{generate, SceneSpec};

    #[test]
    fn loss_arithmetic() {
        // Pick logits and occurrences whose parts hit CE = 0.8 and L_W = 0.3.
        let p: f64 = (-0.8f64).exp();
        let logits = Tensor::new(&[1, 2], vec![(p / (1.0 - p)).ln(), 0.0]).unwrap();
        let prior = BetaPrior::new(1.0, 1.0).unwrap();
        let cfg = TrainConfig {
            eps: 0.0,
            ..Default::default()
        };
        // Beta(1, 1) with N = 1 has quantile 0.5; pick t with |ln t - ln 0.5| = 0.3.
        let t = 0.5 * 0.3f64.exp();
        let occ = Tensor::new(&[1, 1], vec![t]).unwrap();
        let parts = total_loss(&logits, Targets::Classes(&[0]), &occ, &prior, &cfg).unwrap();
        assert!((parts.cls - 0.8).abs() < 1e-12);
        assert!((parts.reg - 0.3).abs() < 1e-12);
        assert!((parts.total - 0.83).abs() < 1e-12);

        let no_reg = TrainConfig { w_reg: 0.0, ..cfg };
        let parts = total_loss(&logits, Targets::Classes(&[0]), &occ, &prior, &no_reg).unwrap();
        assert_eq!(parts.total, parts.cls);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let prior = BetaPrior::new(1.0, 1.0).unwrap();
        let q = prior.midrank_quantiles(2).unwrap();
        let occ = Tensor::new(&[1, 2], vec![q[1], q[0]]).unwrap();
        let logits = Tensor::new(&[2, 2], vec![800.0, 0.0, 0.0, 800.0]).unwrap();
        let cfg = TrainConfig {
            eps: 0.0,
            ..Default::default()
        };
        let parts = total_loss(&logits, Targets::Classes(&[0, 1]), &occ, &prior, &cfg).unwrap();
        assert!(parts.total.abs() < 1e-15);
    }

    #[test]
    fn attribute_loss_is_mean_bce() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let occ = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        let cfg = TrainConfig {
            w_reg: 0.0,
            ..Default::default()
        };
        let prior = BetaPrior::new(1.0, 1.0).unwrap();
        let parts = total_loss(&logits, Targets::Attributes(&[1.0, 0.0]), &occ, &prior, &cfg).unwrap();
        assert!((parts.cls - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { w_reg: -0.1, ..Default::default() },
            TrainConfig { alpha: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        assert!(TrainConfig { batch_size: 1, w_reg: 0.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn schedule_drops_after_two_thirds() {
        let cfg = TrainConfig { epochs: 30, learning_rate: 1.0, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(19), 1.0);
        assert!((cfg.learning_rate_at(20) - 0.1).abs() < 1e-15);
    }

    fn tiny_setup() -> (Model, Vec<Sample>) {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            center_jitter: 1.0,
            anchor_jitter: 0.0,
            parts: SceneSpec::default().parts.into_iter().map(|mut p| {
                p.anchor = (p.anchor.0 / 2.0, p.anchor.1 / 2.0);
                p.size = (p.size.0 / 2.0, p.size.1 / 2.0);
                p
            }).collect(),
            ..Default::default()
        };
        let data = generate(&spec, 16, 1).unwrap();
        let config = ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 8],
                strides: vec![2, 2],
                ..Default::default()
            },
            parts: 3,
            ..Default::default()
        };
        (Model::new(config, 0).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data) = tiny_setup();
        let before = Vec::from_iter(model.state().into_iter().filter(|(n, _)| !n.contains("running")));
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 8,
            ..Default::default()
        };
        let log = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        let after = Vec::from_iter(model.state().into_iter().filter(|(n, _)| !n.contains("running")));
        assert_eq!(before, after);
        assert!(log.to_csv().starts_with("epoch,loss,cls_loss,reg_loss,accuracy\n0,"));
    }

    #[test]
    fn deterministic_metrics_and_checkpoint() {
        let run = || {
            let (mut model, data) = tiny_setup();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                crop: 2,
                ..Default::default()
            };
            let log = train(&mut model, &data, &cfg).unwrap();
            let mut bytes = Vec::new();
            write_dump(&mut bytes, &model.state()).unwrap();
            (log.to_csv(), bytes)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn per_attribute_training_runs() {
        let (_, data) = tiny_setup();
        let config = ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 8],
                strides: vec![2, 2],
                ..Default::default()
            },
            parts: 3,
            heads: Heads::PerAttribute(5),
            ..Default::default()
        };
        let mut model = Model::new(config, 0).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let log = train(&mut model, &data, &cfg).unwrap();
        assert!(log.epochs[0].loss.is_finite());
    }

    #[test]
    fn exploding_rate_aborts_with_batch_index() {
        let (mut model, data) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e200,
            ..Default::default()
        };
        let r = train(&mut model, &data, &cfg);
        assert!(matches!(r, Err(Error::NumericalAbort { .. })), "{r:?}");
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let (model, _) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgt");
        save_checkpoint(&path, &model).unwrap();
        let (mut other, _) = tiny_setup();
        other.dictionary.parts_mut().data_mut()[0] = 42.0;
        load_checkpoint(&path, &mut other).unwrap();
        assert_eq!(other.state(), model.state());
    }
}
