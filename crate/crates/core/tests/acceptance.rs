//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regroup::autodiff::{grad_check, GradReport, Graph, Var};
use regroup::backbone::BackboneConfig;
use regroup::cli::{self, Splits};
use regroup::config::RunConfig;
use regroup::evaluator::{attribution_peak, evaluate, EvalReport};
use regroup::grouping::{AssignmentMap, PartDictionary, SmoothingKernel};
use regroup::head::{attribute_pixels, AttentionVector, HeadConfig, HeadParameters, Heads};
use regroup::model::{Model, ModelConfig};
use regroup::nn::{Mode, Session};
use regroup::regularizer::{occurrence_loss, sorted_distance, wasserstein_oracle, BetaPrior, RegularizerConfig};
use regroup::synthetic::Sample;
use regroup::trainer::{total_loss_var, Targets, TrainConfig};
use regroup::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;

/// Worst per-coordinate relative error, with denominators floored at 1e-6 so
/// coordinates whose true gradient is at roundoff level do not dominate.
fn rel_error(rep: &GradReport) -> f64 {
    rep.analytic
        .data()
        .iter()
        .zip(rep.numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Differencing step. Functions with max, sort or |·| kinks need a small one so
/// the stencil does not straddle a kink.
const KINKED_STEP: f64 = 1e-5;
/// The assignment softmax is smooth; Richardson extrapolation keeps truncation
/// negligible at this step while cancellation noise on O(1e-8) entries stays
/// under the tolerance.
const SMOOTH_STEP: f64 = 1e-4;

fn check_with<F>(f: F, at: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Graph, Var) -> regroup::Result<Var>,
{
    rel_error(&grad_check(f, at, step, GRAD_TOL).expect("grad_check runs"))
}

fn check<F>(f: F, at: &Tensor) -> f64
where
    F: Fn(&mut Graph, Var) -> regroup::Result<Var>,
{
    check_with(f, at, KINKED_STEP)
}

fn dictionary(k: usize, d: usize, rng: &mut ChaCha8Rng) -> PartDictionary {
    let sig: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..0.9)).collect();
    PartDictionary::with_sigmas(Tensor::randn(&[k, d], 1.0, rng), &sig).unwrap()
}

fn head(d: usize, classes: usize, rng: &mut ChaCha8Rng) -> HeadParameters {
    HeadParameters::new(
        HeadConfig {
            dim: d,
            blocks: 2,
            heads: Heads::Single { classes },
            attention: true,
        },
        rng,
    )
    .unwrap()
}

fn criterion_gradients() -> Outcome {
    let (n, d, k, hw, c) = (4, 4, 3, 5, 2);
    let labels = [0usize, 1, 1, 0];
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, d, hw, hw], 1.0, &mut rng);
        let dict = dictionary(k, d, &mut rng);
        let sig = Tensor::from_vec(dict.sigmas());
        let parts = dict.parts().clone();
        let raw = dict.raw_smoothing().clone();
        let w_q = Tensor::randn(&[n, k, hw, hw], 1.0, &mut rng);
        let w_t = Tensor::randn(&[n, k], 1.0, &mut rng);
        let w_z = Tensor::randn(&[n, d, k], 1.0, &mut rng);
        let q = Tensor::uniform(&[n, k, hw, hw], 0.05, 1.0, &mut rng);
        let occ = Tensor::uniform(&[k, n], 0.02, 0.98, &mut rng);
        let z = Tensor::randn(&[n, d, k], 1.0, &mut rng);
        let base = head(d, c, &mut rng);
        let quantiles = BetaPrior::new(1.0, 1e-3).unwrap().midrank_quantiles(n).unwrap();

        let dot = |g: &mut Graph, v: Var, w: &Tensor| {
            let w = g.constant(w.clone());
            let m = g.mul(v, w)?;
            Ok(g.sum(m))
        };

        note(
            "assign",
            check_with(
                |g, xv| {
                    let p = g.constant(parts.clone());
                    let s = g.constant(sig.clone());
                    let q = g.assign(xv, p, s)?;
                    dot(g, q, &w_q)
                },
                &x,
                SMOOTH_STEP,
            ),
        );
        note(
            "smooth+occurrence",
            check(
                |g, qv| {
                    let sm = g.smooth(qv, &SmoothingKernel::default())?;
                    let t = g.spatial_max(sm)?;
                    dot(g, t, &w_t)
                },
                &q,
            ),
        );
        note(
            "occurrence_loss",
            check(
                |g, t| g.occurrence_loss(t, &quantiles, RegularizerConfig::new(1e-6).unwrap()),
                &occ,
            ),
        );
        for (i, point) in [&x, &q, &parts].into_iter().enumerate() {
            note(
                "pool_regions",
                check(
                    |g, v| {
                        let mut ins = [None, None, None];
                        ins[i] = Some(v);
                        let xv = ins[0].unwrap_or_else(|| g.constant(x.clone()));
                        let qv = ins[1].unwrap_or_else(|| g.constant(q.clone()));
                        let pv = ins[2].unwrap_or_else(|| g.constant(parts.clone()));
                        let sv = g.constant(sig.clone());
                        let r = g.pool_regions(xv, qv, pv, sv)?;
                        dot(g, r, &w_z)
                    },
                    point,
                ),
            );
        }
        note(
            "transform",
            check(
                |g, zv| {
                    Session::scoped(g, Mode::Train, |s| {
                        let zt = base.clone().transform_var(s, zv)?;
                        dot(&mut s.graph, zt, &w_z)
                    })
                },
                &z,
            ),
        );
        note(
            "attend",
            check(
                |g, zv| {
                    Session::scoped(g, Mode::Train, |s| {
                        let a = base.clone().attend_var(s, zv, 0)?;
                        dot(&mut s.graph, a, &w_t)
                    })
                },
                &z,
            ),
        );
        let a = Tensor::uniform(&[n, k], 0.1, 1.0, &mut rng);
        note(
            "classify",
            check(
                |g, zv| {
                    Session::scoped(g, Mode::Train, |s| {
                        let av = s.graph.constant(a.clone());
                        let logits = base.classify_var(s, zv, av, 0)?;
                        s.graph.cross_entropy(logits, &labels)
                    })
                },
                &z,
            ),
        );
        let cfg = TrainConfig::default();
        let full = |g: &mut Graph, xv: Var, pv: Var| {
            Session::scoped(g, Mode::Train, |s| {
                let rs = s.graph.constant(raw.clone());
                let sv = s.graph.sigmoid(rs);
                let q = s.graph.assign(xv, pv, sv)?;
                let sm = s.graph.smooth(q, &SmoothingKernel::default())?;
                let t = s.graph.spatial_max(sm)?;
                let r = s.graph.pool_regions(xv, q, pv, sv)?;
                let out = base.clone().forward(s, r)?;
                let (total, _, _) =
                    total_loss_var(&mut s.graph, &out.logits, Targets::Classes(&labels), t, Some(&quantiles), &cfg)?;
                Ok(total)
            })
        };
        note(
            "end-to-end (features)",
            check(
                |g, xv| {
                    let pv = g.constant(parts.clone());
                    full(g, xv, pv)
                },
                &x,
            ),
        );
        note(
            "end-to-end (dictionary)",
            check(
                |g, pv| {
                    let xv = g.constant(x.clone());
                    full(g, xv, pv)
                },
                &parts,
            ),
        );
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max <= GRAD_TOL, format!("max relative error {max:.1e} <= {GRAD_TOL:.0e} [{detail}]"))
}

// ---------------------------------------------------------------- Beta numerics

fn criterion_beta() -> Outcome {
    let mut worst_closed: f64 = 0.0;
    let xs: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    for &x in &xs {
        let cases = [
            (1.0, 1.0, x),
            (1.0, 1e-3, 1.0 - (1.0 - x).powf(1e-3)),
            (1.0, 3.5, 1.0 - (1.0 - x).powf(3.5)),
            (2e-3, 1.0, x.powf(2e-3)),
            (0.7, 1.0, x.powf(0.7)),
        ];
        for (a, b, want) in cases {
            let got = BetaPrior::new(a, b).unwrap().cdf(x).unwrap();
            worst_closed = worst_closed.max((got - want).abs());
        }
    }
    worst_closed = worst_closed.max((BetaPrior::new(2.0, 2.0).unwrap().cdf(0.5).unwrap() - 0.5).abs());

    let mut worst_trip: f64 = 0.0;
    for (a, b) in [(1.0, 1e-3), (2e-3, 1e-3)] {
        let prior = BetaPrior::new(a, b).unwrap();
        for &z in &xs {
            let p = prior.quantile(z).unwrap();
            worst_trip = worst_trip.max((prior.cdf_at(p).unwrap() - z).abs());
        }
    }
    outcome(
        worst_closed <= 1e-8 && worst_trip <= 1e-6,
        format!("closed forms {worst_closed:.1e} <= 1e-8, round trip {worst_trip:.1e} <= 1e-6"),
    )
}

// ---------------------------------------------------------------- regularizer oracle

fn criterion_regularizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let priors = [BetaPrior::new(1.0, 1e-3).unwrap(), BetaPrior::new(0.5, 0.5).unwrap()];
    let (mut worst_log, mut inexact) = (0.0f64, 0);
    for trial in 0..200 {
        let prior = &priors[trial % 2];
        let k = rng.random_range(1..=4);
        let n = [8, 32, 128][rng.random_range(0..3)];
        let data: Vec<f64> = (0..k * n).map(|_| rng.random_range(1e-4..1.0)).collect();
        let batch = Tensor::new(&[k, n], data.clone()).unwrap();
        let got = occurrence_loss(&batch, prior, RegularizerConfig::new(0.0).unwrap()).unwrap();

        // Independent oracle: sort each row, pair with ascending quantiles, L1 of logs.
        let qs = prior.midrank_quantiles(n).unwrap();
        let mut total = 0.0;
        for row in data.chunks(n) {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            total += sorted.iter().zip(&qs).map(|(t, q)| (t.ln() - q.ln()).abs()).sum::<f64>() / n as f64;
        }
        let want = total / k as f64;
        worst_log = worst_log.max((got - want).abs() / want.abs().max(1.0));
        for row in data.chunks(n) {
            if sorted_distance(row, &qs).unwrap() != wasserstein_oracle(row, &qs).unwrap() {
                inexact += 1;
            }
        }
    }
    outcome(
        worst_log <= 1e-12 && inexact == 0,
        format!("log oracle {worst_log:.1e} <= 1e-12, {inexact} inexact Wasserstein rows"),
    )
}

// ---------------------------------------------------------------- invariants

fn criterion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sum_err, mut simplex_err, mut norm_err, mut outside) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let k = rng.random_range(2..=5);
        let config = ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 8],
                strides: vec![2, 2],
                ..Default::default()
            },
            parts: k,
            heads: Heads::Single { classes: 3 },
            ..Default::default()
        };
        let mut model = Model::new(config, rng.random()).unwrap();
        let images = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut s = Session::new(Mode::Train);
        let x = s.graph.constant(images);
        let f = model.forward(&mut s, x).unwrap();
        let q = s.graph.value(f.assignment);
        let plane = 16;
        for b in 0..2 {
            for p in 0..plane {
                let total: f64 = (0..k).map(|c| q.data()[(b * k + c) * plane + p]).sum();
                sum_err = sum_err.max((total - 1.0).abs());
            }
        }
        let a = s.graph.value(f.head.attention[0]);
        for row in a.data().chunks(k) {
            simplex_err = simplex_err.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&v| v < 0.0) {
                simplex_err = f64::INFINITY;
            }
        }
        let z = s.graph.value(f.regions);
        let d = z.shape()[1];
        for b in 0..2 {
            for c in 0..k {
                let norm: f64 = (0..d).map(|f| z.data()[(b * d + f) * k + c].powi(2)).sum::<f64>().sqrt();
                if norm != 0.0 {
                    norm_err = norm_err.max((norm - 1.0).abs());
                }
            }
            let map = AssignmentMap::new(q.outer(b)).unwrap();
            let av = AttentionVector(a.data()[b * k..(b + 1) * k].to_vec());
            let lo = av.0.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = av.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let attr = attribute_pixels(&map, &av).unwrap();
            outside += attr.0.data().iter().filter(|&&v| v < lo || v > hi).count();
        }
    }
    outcome(
        sum_err <= 1e-10 && simplex_err <= 1e-10 && norm_err <= 1e-10 && outside == 0,
        format!(
            "assignment sums {sum_err:.1e}, attention simplex {simplex_err:.1e}, region norms {norm_err:.1e} (all <= 1e-10), {outside} attributions outside [min a, max a]"
        ),
    )
}

// ---------------------------------------------------------------- trained models

struct Trained {
    seed: u64,
    full: Model,
    full_report: EvalReport,
    plain_report: EvalReport,
    test: Vec<Sample>,
}

fn default_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg
}

fn train_pair(seed: u64) -> Trained {
    let cfg = default_config(seed);
    let Splits { train, fit, test } = cli::splits(&cfg).unwrap();
    let (mut full, _) = cli::fit_model(&cfg, &train).unwrap();
    let full_report = evaluate(&mut full, &fit, &test, cfg.eval_batch).unwrap();
    let mut plain_cfg = cfg.clone();
    plain_cfg.train.w_reg = 0.0;
    let (mut plain, _) = cli::fit_model(&plain_cfg, &train).unwrap();
    let plain_report = evaluate(&mut plain, &fit, &test, cfg.eval_batch).unwrap();
    println!(
        "  seed {seed}: regularized accuracy {:.3} landmark {:.4} pointing {:.3} | unregularized accuracy {:.3} landmark {:.4}",
        full_report.accuracy,
        full_report.landmark_error,
        full_report.pointing_error,
        plain_report.accuracy,
        plain_report.landmark_error
    );
    Trained {
        seed,
        full,
        full_report,
        plain_report,
        test,
    }
}

fn criterion_ablation(runs: &[Trained], minutes: f64) -> Outcome {
    let lower = runs
        .iter()
        .all(|r| r.full_report.landmark_error < r.plain_report.landmark_error);
    let mean = |f: &dyn Fn(&Trained) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let gap = (mean(&|r| r.full_report.accuracy) - mean(&|r| r.plain_report.accuracy)).abs();
    let errors = runs
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.full_report.landmark_error, r.plain_report.landmark_error))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        lower && gap <= 0.02 && minutes <= 45.0,
        format!(
            "landmark error regularized < unregularized on every seed [{errors}], accuracy gap {:.1} pp <= 2, {minutes:.1} min <= 45",
            100.0 * gap
        ),
    )
}

fn criterion_pointing(runs: &mut [Trained]) -> Outcome {
    let misses: Vec<f64> = runs.iter().map(|r| r.full_report.pointing_error).collect();
    let primary = misses[0];
    let (missed, tied) = plateau_misses(&mut runs[0]);
    outcome(
        primary <= 0.10,
        format!(
            "seed {} miss rate {primary:.3} <= 0.10 (all seeds {misses:.3?}); {tied} of {missed} misses have a cell inside the bbox within 1e-6 of the peak",
            runs[0].seed
        ),
    )
}

/// Counts misses, and misses where some cell whose image origin lies in the
/// bbox reaches the peak value to within 1e-6.
fn plateau_misses(run: &mut Trained) -> (usize, usize) {
    let stride = run.full.stride();
    let images: Vec<&Tensor> = run.test.iter().map(|s| &s.image).collect();
    let out = run.full.infer(&images, 100).unwrap();
    let (mut missed, mut tied) = (0, 0);
    for (s, o) in run.test.iter().zip(&out) {
        let map = attribute_pixels(&o.assignment, &o.attention[0]).unwrap().0;
        let (r, c) = attribution_peak(&map, stride);
        if s.bbox.contains(r as f64, c as f64) {
            continue;
        }
        missed += 1;
        let w = map.shape()[1];
        let peak = map.data().iter().cloned().fold(f64::MIN, f64::max);
        let inside = map.data().iter().enumerate().any(|(i, &v)| {
            s.bbox.contains(((i / w) * stride) as f64, ((i % w) * stride) as f64) && peak - v < 1e-6
        });
        tied += inside as usize;
    }
    (missed, tied)
}

/// For each planted part, the learned part with the most assignment mass at
/// its landmark, averaged over samples where it is present.
fn match_parts(model: &mut Model, samples: &[Sample]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let stride = model.stride();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let out = model.infer(&images, 100).unwrap();
    let k = model.config().parts;
    let planted = samples[0].landmarks.len();
    let mut score = vec![vec![0.0; k]; planted];
    for (s, o) in samples.iter().zip(&out) {
        for (j, lm) in s.landmarks.iter().enumerate() {
            if let Some((r, c)) = lm {
                let (y, x) = (*r as usize / stride, *c as usize / stride);
                for (p, v) in score[j].iter_mut().enumerate() {
                    *v += o.assignment.values().get(&[p, y, x]);
                }
            }
        }
    }
    let matched = score
        .iter()
        .map(|row| (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap())
        .collect();
    let occurrence = (0..k).map(|p| out.iter().map(|o| o.occurrence[p]).collect()).collect();
    (matched, occurrence)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn criterion_prior(runs: &mut [Trained]) -> Outcome {
    let spec = RunConfig::default().scene;
    let always: Vec<usize> = (0..spec.parts.len()).filter(|&j| spec.parts[j].probability == 1.0).collect();
    let mut medians = Vec::new();
    for r in runs.iter_mut() {
        let (matched, occ) = match_parts(&mut r.full, &r.test);
        for &j in &always {
            medians.push((r.seed, j, median(&occ[matched[j]])));
        }
    }
    let shaped = medians.iter().all(|m| m.2 >= 0.9);

    let sometimes = spec
        .parts
        .iter()
        .position(|p| p.probability == 0.4)
        .expect("default scene plants a part with p = 0.4");
    let mut cfg = default_config(0);
    cfg.train.alpha = 2e-3;
    let Splits { train, test, .. } = cli::splits(&cfg).unwrap();
    let (mut model, _) = cli::fit_model(&cfg, &train).unwrap();
    let (matched, occ) = match_parts(&mut model, &test);
    let t = &occ[matched[sometimes]];
    let low = t.iter().filter(|&&v| v < 0.2).count() as f64 / t.len() as f64;
    let high = t.iter().filter(|&&v| v > 0.8).count() as f64 / t.len() as f64;
    let present: Vec<f64> = test.iter().map(|s| s.presence[sometimes] as u8 as f64).collect();
    let presence = present.iter().sum::<f64>() / present.len() as f64;
    let corr = correlation(t, &present);
    let medians = medians
        .iter()
        .map(|(s, j, m)| format!("seed {s} part {j}: {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        shaped && low + high >= 0.7,
        format!(
            "Beta(1,1e-3) medians >= 0.9 [{medians}]; Beta(2e-3,1e-3) p=0.4 part (learned part {}): {:.0}% below 0.2 + {:.0}% above 0.8 = {:.0}% >= 70% (planted presence {:.0}%, correlation with presence {corr:.2})",
            matched[sometimes],
            100.0 * low,
            100.0 * high,
            100.0 * (low + high),
            100.0 * presence
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.txt");
    std::fs::write(&config, "train_samples=128\nfit_samples=10\ntest_samples=10\nepochs=2\nseed=11\n").unwrap();
    let run = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_regroup"))
            .args(["train", "--threads", "1", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
        let read = |f: &str| std::fs::read(dir.path().join(out).join(f)).unwrap();
        (read(cli::METRICS), read(cli::CHECKPOINT))
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a == b,
        format!("metrics {} bytes, checkpoint {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --nocapture; list mode must stay quiet.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut guarded = |n, name, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "[{}] criterion {n} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((n, name, o));
    };

    guarded(1, "gradient correctness", &mut criterion_gradients);
    guarded(2, "Beta numerics", &mut criterion_beta);
    guarded(3, "regularizer oracle", &mut criterion_regularizer);
    guarded(4, "simplex and normalization invariants", &mut criterion_invariants);

    let start = Instant::now();
    let mut runs: Vec<Trained> = Vec::new();
    let trained = panic::catch_unwind(AssertUnwindSafe(|| (0..3).map(train_pair).collect::<Vec<_>>()));
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    match trained {
        Ok(r) => runs = r,
        Err(_) => println!("  training the ablation models panicked"),
    }
    let have_runs = !runs.is_empty();
    guarded(5, "synthetic ablation", &mut || {
        assert!(have_runs, "no trained models");
        criterion_ablation(&runs, minutes)
    });
    guarded(6, "pointing game", &mut || {
        assert!(have_runs, "no trained models");
        criterion_pointing(&mut runs)
    });
    guarded(7, "prior shaping", &mut || {
        assert!(have_runs, "no trained models");
        criterion_prior(&mut runs)
    });
    guarded(8, "determinism", &mut criterion_determinism);

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
