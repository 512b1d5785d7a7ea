//! Commands behind the `regroup` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalReport};
use crate::head::attribute_pixels;
use crate::model::Model;
use crate::synthetic::{self, Sample};
use crate::tensor::Tensor;
use crate::trainer::{self, MetricsLog};

pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT: &str = "checkpoint.rgt";
pub const METRICS: &str = "metrics.csv";
pub const EVAL_TEXT: &str = "eval.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const ABLATION: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    Visualize { samples: usize },
    Ablate,
}

/// Process exit status for an error: 2 config, 3 I/O, 4 numerical, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::NumericalAbort { .. } | Error::NonFinite(_) | Error::NoConvergence(_) => 4,
        _ => 1,
    }
}

/// Reads the config file (if any) and applies flag overrides.
pub fn resolve(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(out) = out {
        cfg.out = out.to_path_buf();
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub fit: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads the splits written by `gen`, or regenerates them from the seed.
pub fn splits(cfg: &RunConfig) -> Result<Splits> {
    if let Some(dir) = &cfg.data {
        return Ok(Splits {
            train: synthetic::load(&dir.join("train"))?,
            fit: synthetic::load(&dir.join("fit"))?,
            test: synthetic::load(&dir.join("test"))?,
        });
    }
    let total = cfg.train_samples + cfg.fit_samples + cfg.test_samples;
    let mut all = synthetic::generate(&cfg.scene, total, cfg.train.seed)?;
    let test = all.split_off(cfg.train_samples + cfg.fit_samples);
    let fit = all.split_off(cfg.train_samples);
    Ok(Splits { train: all, fit, test })
}

/// Runs one command; `checkpoint` defaults to the one in the output directory.
pub fn run(command: &Command, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_ECHO), cfg.echo())?;
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    match command {
        Command::Gen => gen(cfg),
        Command::Train => {
            let data = splits(cfg)?;
            let (model, log) = fit_model(cfg, &data.train)?;
            trainer::save_checkpoint(&cfg.out.join(CHECKPOINT), &model)?;
            fs::write(cfg.out.join(METRICS), log.to_csv())?;
            Ok(())
        }
        Command::Eval => {
            let data = splits(cfg)?;
            let mut model = restore(cfg, &checkpoint)?;
            let report = evaluate(&mut model, &data.fit, &data.test, cfg.eval_batch)?;
            fs::write(cfg.out.join(EVAL_TEXT), report.to_key_value())?;
            fs::write(
                cfg.out.join(EVAL_CSV),
                format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
            )?;
            Ok(())
        }
        Command::Visualize { samples } => {
            let data = splits(cfg)?;
            let mut model = restore(cfg, &checkpoint)?;
            visualize(&mut model, &data.test[..(*samples).min(data.test.len())], &cfg.out, cfg.eval_batch)
        }
        Command::Ablate => {
            let data = splits(cfg)?;
            let rows = ablate(cfg, &data)?;
            let mut csv = String::from("variant,accuracy,landmark_error\n");
            for (name, r) in rows {
                writeln!(csv, "{name},{},{}", r.accuracy, r.landmark_error).unwrap();
            }
            fs::write(cfg.out.join(ABLATION), csv)?;
            Ok(())
        }
    }
}

fn gen(cfg: &RunConfig) -> Result<()> {
    let data = splits(&RunConfig { data: None, ..cfg.clone() })?;
    for (name, split) in [("train", &data.train), ("fit", &data.fit), ("test", &data.test)] {
        let dir = cfg.out.join(name);
        fs::create_dir_all(&dir)?;
        synthetic::save(&dir, split)?;
    }
    Ok(())
}

/// Builds a model from the config seed and trains it.
pub fn fit_model(cfg: &RunConfig, train: &[Sample]) -> Result<(Model, MetricsLog)> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let log = trainer::train(&mut model, train, &cfg.train)?;
    Ok((model, log))
}

fn restore(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    trainer::load_checkpoint(checkpoint, &mut model)?;
    Ok(model)
}

/// Full model, no occurrence regularization, and uniform attention, all on the same seed.
pub fn ablate(cfg: &RunConfig, data: &Splits) -> Result<Vec<(&'static str, EvalReport)>> {
    let mut plain = cfg.clone();
    plain.train.w_reg = 0.0;
    let mut uniform = cfg.clone();
    uniform.model.attention = false;
    [("full", cfg), ("no_regularization", &plain), ("no_attention", &uniform)]
        .into_iter()
        .map(|(name, c)| {
            let (mut model, _) = fit_model(c, &data.train)?;
            Ok((name, evaluate(&mut model, &data.fit, &data.test, c.eval_batch)?))
        })
        .collect()
}

/// Evenly spaced hues, one per part.
fn palette(k: usize) -> Vec<[f64; 3]> {
    (0..k)
        .map(|i| {
            let h = 6.0 * i as f64 / k as f64;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            match h as usize {
                0 => [1.0, x, 0.0],
                1 => [x, 1.0, 0.0],
                2 => [0.0, 1.0, x],
                3 => [0.0, x, 1.0],
                4 => [x, 0.0, 1.0],
                _ => [1.0, 0.0, x],
            }
        })
        .collect()
}

/// Blue to red through green for `v` in [0, 1].
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(2.0 * v - 1.0).max(0.0), 1.0 - (2.0 * v - 1.0).abs(), (1.0 - 2.0 * v).max(0.0)]
}

/// Half-and-half blend of `image` with a per-cell color, upsampled by nearest neighbour.
fn overlay(image: &Tensor, stride: usize, cell: impl Fn(usize, usize) -> [f64; 3]) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let color = cell(r / stride, c / stride);
            for (ch, v) in color.iter().enumerate() {
                let at = (ch * h + r) * w + c;
                out.data_mut()[at] = 0.5 * image.data()[at] + 0.5 * v;
            }
        }
    }
    out
}

/// Writes `sample{i}_{image,assignment,attention,attribution}.ppm` per sample.
pub fn visualize(model: &mut Model, samples: &[Sample], out: &Path, batch: usize) -> Result<()> {
    let stride = model.stride();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let results = model.infer(&images, batch)?;
    let colors = palette(model.config().parts);
    let path = |i: usize, what: &str| -> PathBuf { out.join(format!("sample{i}_{what}.ppm")) };
    for (i, (s, r)) in samples.iter().zip(&results).enumerate() {
        let q = r.assignment.values();
        let k = r.assignment.parts();
        let a = &r.attention[0].0;
        let top = a.iter().cloned().fold(f64::MIN, f64::max);
        let mix = |y: usize, x: usize, weight: &dyn Fn(usize) -> f64| {
            let mut c = [0.0; 3];
            for p in 0..k {
                let share = q.get(&[p, y, x]) * weight(p);
                c.iter_mut().zip(&colors[p]).for_each(|(c, v)| *c += share * v);
            }
            c
        };
        let attribution = attribute_pixels(&r.assignment, &r.attention[0])?.0;
        let (lo, hi) = attribution
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        synthetic::write_ppm(&path(i, "image"), &s.image)?;
        synthetic::write_ppm(&path(i, "assignment"), &overlay(&s.image, stride, |y, x| mix(y, x, &|_| 1.0)))?;
        synthetic::write_ppm(
            &path(i, "attention"),
            &overlay(&s.image, stride, |y, x| mix(y, x, &|p| a[p] / top)),
        )?;
        synthetic::write_ppm(
            &path(i, "attribution"),
            &overlay(&s.image, stride, |y, x| heat((attribution.get(&[y, x]) - lo) / span)),
        )?;
    }
    Ok(())
}
