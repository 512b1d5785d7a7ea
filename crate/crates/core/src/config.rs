//! `key=value` run configuration covering data, model and training.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::Heads;
use crate::model::ModelConfig;
use crate::synthetic::SceneSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub fit_samples: usize,
    pub test_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_batch: usize,
    /// Dataset directory written by `gen`; when unset the splits are generated in memory.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_samples: 2000,
            fit_samples: 500,
            test_samples: 500,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_batch: 100,
            data: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every recognized key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "height",
        "width",
        "noise",
        "center_jitter",
        "anchor_jitter",
        "part_probabilities",
        "train_samples",
        "fit_samples",
        "test_samples",
        "parts",
        "widths",
        "strides",
        "batch_norm",
        "blocks",
        "attention",
        "heads",
        "kernel_size",
        "kernel_bandwidth",
        "learning_rate",
        "momentum",
        "weight_decay",
        "batch_size",
        "epochs",
        "w_cls",
        "w_reg",
        "alpha",
        "beta",
        "eps",
        "seed",
        "hflip",
        "crop",
        "decay_at",
        "eval_batch",
        "data",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "height" => self.scene.height = parse(key, v)?,
            "width" => self.scene.width = parse(key, v)?,
            "noise" => self.scene.noise = parse(key, v)?,
            "center_jitter" => self.scene.center_jitter = parse(key, v)?,
            "anchor_jitter" => self.scene.anchor_jitter = parse(key, v)?,
            "part_probabilities" => {
                let p: Vec<f64> = parse_list(key, v)?;
                if p.len() != self.scene.parts.len() {
                    return Err(Error::Config(format!(
                        "{key}: expected {} values, got {}",
                        self.scene.parts.len(),
                        p.len()
                    )));
                }
                self.scene.parts.iter_mut().zip(p).for_each(|(t, p)| t.probability = p);
            }
            "train_samples" => self.train_samples = parse(key, v)?,
            "fit_samples" => self.fit_samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            "parts" => self.model.parts = parse(key, v)?,
            "widths" => self.model.backbone.widths = parse_list(key, v)?,
            "strides" => self.model.backbone.strides = parse_list(key, v)?,
            "batch_norm" => self.model.backbone.batch_norm = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "attention" => self.model.attention = parse(key, v)?,
            "heads" => {
                self.model.heads = match v.split_once(':') {
                    None if v == "single" => Heads::Single {
                        classes: self.scene.classes(),
                    },
                    Some(("attributes", m)) => Heads::PerAttribute(parse(key, m)?),
                    _ => return Err(Error::Config(format!("{key}: expected single or attributes:M, got {v:?}"))),
                }
            }
            "kernel_size" => self.model.kernel_size = parse(key, v)?,
            "kernel_bandwidth" => self.model.kernel_bandwidth = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "w_cls" => self.train.w_cls = parse(key, v)?,
            "w_reg" => self.train.w_reg = parse(key, v)?,
            "alpha" => self.train.alpha = parse(key, v)?,
            "beta" => self.train.beta = parse(key, v)?,
            "eps" => self.train.eps = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "hflip" => self.train.hflip = parse(key, v)?,
            "crop" => self.train.crop = parse(key, v)?,
            "decay_at" => self.train.decay_at = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "height" => self.scene.height.to_string(),
            "width" => self.scene.width.to_string(),
            "noise" => self.scene.noise.to_string(),
            "center_jitter" => self.scene.center_jitter.to_string(),
            "anchor_jitter" => self.scene.anchor_jitter.to_string(),
            "part_probabilities" => join(&self.scene.parts.iter().map(|p| p.probability).collect::<Vec<_>>()),
            "train_samples" => self.train_samples.to_string(),
            "fit_samples" => self.fit_samples.to_string(),
            "test_samples" => self.test_samples.to_string(),
            "parts" => self.model.parts.to_string(),
            "widths" => join(&self.model.backbone.widths),
            "strides" => join(&self.model.backbone.strides),
            "batch_norm" => self.model.backbone.batch_norm.to_string(),
            "blocks" => self.model.blocks.to_string(),
            "attention" => self.model.attention.to_string(),
            "heads" => match self.model.heads {
                Heads::Single { .. } => "single".into(),
                Heads::PerAttribute(m) => format!("attributes:{m}"),
            },
            "kernel_size" => self.model.kernel_size.to_string(),
            "kernel_bandwidth" => self.model.kernel_bandwidth.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "w_cls" => self.train.w_cls.to_string(),
            "w_reg" => self.train.w_reg.to_string(),
            "alpha" => self.train.alpha.to_string(),
            "beta" => self.train.beta.to_string(),
            "eps" => self.train.eps.to_string(),
            "seed" => self.train.seed.to_string(),
            "hflip" => self.train.hflip.to_string(),
            "crop" => self.train.crop.to_string(),
            "decay_at" => self.train.decay_at.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("KEYS and get() list the same keys"),
        }
    }

    /// Parses `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model.backbone.validate()?;
        let stride = self.model.backbone.total_stride();
        if self.scene.height % stride != 0 || self.scene.width % stride != 0 {
            return Err(Error::Config(format!(
                "canvas {}×{} is not divisible by the backbone stride {stride}",
                self.scene.height, self.scene.width
            )));
        }
        if let Heads::Single { classes } = self.model.heads {
            if classes != self.scene.classes() {
                return Err(Error::Config(format!(
                    "model has {classes} classes, scene has {}",
                    self.scene.classes()
                )));
            }
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("out must name a directory".into()));
        }
        if self.model.parts == 0 || self.eval_batch == 0 {
            return Err(Error::Config("parts and eval_batch must be positive".into()));
        }
        if self.train_samples < self.train.batch_size || self.fit_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("every split needs samples; train needs at least one batch".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key}={}", self.get(key)).unwrap();
        }
        s
    }
}
