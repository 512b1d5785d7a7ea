//! Small convolutional feature extractor trained from scratch.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Mode, Parameters, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per stage; the last one is the feature depth `D`.
    pub widths: Vec<usize>,
    /// Stride of each stage's 3×3 convolution.
    pub strides: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            batch_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone needs one stride per stage, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("backbone widths and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    norm: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let stages = config
            .widths
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let conv = Conv::new(&format!("backbone.stage{i}.conv"), c_in, w, 3, s, true, rng);
                c_in = w;
                Stage {
                    conv,
                    norm: config.batch_norm.then(|| BatchNorm::new(&format!("backbone.stage{i}.bn"), w)),
                }
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Features `N×D×(H/s)×(W/s)` of images `N×C×H×W`, `s` the total stride.
    pub fn forward(&mut self, s: &mut Session, images: Var) -> Result<Var> {
        let shape = s.graph.shape(images).to_vec();
        let &[_, c, h, w] = &shape[..] else {
            return Err(Error::invalid(format!("backbone needs N×C×H×W, got {shape:?}")));
        };
        let total = self.config.total_stride();
        if c != self.config.in_channels || h % total != 0 || w % total != 0 || h < total || w < total {
            return Err(Error::invalid(format!(
                "input {shape:?} must have {} channels and extents divisible by {total}",
                self.config.in_channels
            )));
        }
        let mut x = images;
        for stage in &mut self.stages {
            x = stage.conv.forward(s, x)?;
            if let Some(norm) = &mut stage.norm {
                x = norm.forward(s, x)?;
            }
            x = s.graph.relu(x);
        }
        Ok(x)
    }

    pub fn zero_biases(&mut self) {
        for stage in &mut self.stages {
            if let Some(b) = &mut stage.conv.bias {
                b.data_mut().fill(0.0);
            }
        }
    }
}

/// Features `D×h×w` of one `C×H×W` image.
pub fn extract(image: &Tensor, params: &mut Backbone, mode: Mode) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut s = Session::frozen(mode);
    let x = s.graph.constant(image.reshape(&shape)?);
    let y = params.forward(&mut s, x)?;
    Ok(s.graph.value(y).outer(0))
}

impl Parameters for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for stage in &self.stages {
            stage.conv.visit(f);
            if let Some(n) = &stage.norm {
                n.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for stage in &mut self.stages {
            stage.conv.visit_mut(f);
            if let Some(n) = &mut stage.norm {
                n.visit_mut(f);
            }
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for n in self.stages.iter().filter_map(|s| s.norm.as_ref()) {
            n.visit_buffers(f);
        }
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        for n in self.stages.iter_mut().filter_map(|s| s.norm.as_mut()) {
            if n.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(config: BackboneConfig, seed: u64) -> Backbone {
        Backbone::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn four_stride_two_stages_shape() {
        let cfg = BackboneConfig {
            widths: vec![8, 16, 32, 32],
            strides: vec![2; 4],
            ..Default::default()
        };
        let mut b = backbone(cfg, 0);
        let img = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(extract(&img, &mut b, Mode::Train).unwrap().shape(), &[32, 4, 4]);
    }

    #[test]
    fn default_shape() {
        let mut b = backbone(BackboneConfig::default(), 0);
        let img = Tensor::zeros(&[3, 64, 64]);
        assert_eq!(extract(&img, &mut b, Mode::Train).unwrap().shape(), &[64, 8, 8]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut b = backbone(BackboneConfig::default(), 0);
        assert!(extract(&Tensor::zeros(&[3, 60, 64]), &mut b, Mode::Train).is_err());
        assert!(extract(&Tensor::zeros(&[1, 64, 64]), &mut b, Mode::Train).is_err());
        assert!(BackboneConfig {
            strides: vec![2],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero() {
        let cfg = BackboneConfig {
            batch_norm: false,
            ..Default::default()
        };
        let mut b = backbone(cfg, 3);
        b.zero_biases();
        let f = extract(&Tensor::zeros(&[3, 32, 32]), &mut b, Mode::Eval).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let img = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let a = extract(&img, &mut backbone(BackboneConfig::default(), 5), Mode::Train).unwrap();
        let b = extract(&img, &mut backbone(BackboneConfig::default(), 5), Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_through_backbone() {
        let cfg = BackboneConfig {
            widths: vec![4, 6, 8],
            strides: vec![2, 2, 1],
            ..Default::default()
        };
        let base = backbone(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let w = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng);
        let rep = grad_check(
            |g, x| {
                Session::scoped(g, Mode::Train, |s| {
                    let y = base.clone().forward(s, x)?;
                    let wv = s.graph.constant(w.clone());
                    let m = s.graph.mul(y, wv)?;
                    Ok(s.graph.sum(m))
                })
            },
            &img,
            1e-5,
            1e-4,
        )
        .unwrap();
        for (i, (a, n)) in rep.analytic.data().iter().zip(rep.numeric.data()).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err <= 1e-4, "index {i}: {a} vs {n}");
        }
    }
}
