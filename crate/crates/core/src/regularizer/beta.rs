//! Beta distribution CDF and quantile with log-space arguments.
//!
//! Strongly U-shaped priors such as Beta(1, 1e-3) put most of their
//! quantiles closer to 1 than the spacing of `f64` near 1, and Beta(2e-3,
//! 1e-3) puts a third of its mass below the smallest subnormal. Quantiles are
//! therefore returned as a [`UnitPoint`] that carries both `ln x` and
//! `ln(1 - x)`, and the CDF can be evaluated from that representation
//! without ever forming `x` itself.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const CF_MAX_ITER: usize = 10_000;
const CF_EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const QUANTILE_TOL: f64 = 1e-8;

/// A point of the open unit interval stored as `(ln x, ln(1 - x))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitPoint {
    ln_x: f64,
    ln_complement: f64,
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl UnitPoint {
    /// Point with log-odds `u = ln(x / (1 - x))`.
    pub fn from_logit(u: f64) -> Self {
        Self {
            ln_x: -softplus(-u),
            ln_complement: -softplus(u),
        }
    }

    pub fn from_value(x: f64) -> Result<Self> {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::invalid(format!("{x} is not inside (0, 1)")));
        }
        Ok(Self {
            ln_x: x.ln(),
            ln_complement: (-x).ln_1p(),
        })
    }

    /// `x` rounded to `f64`; may be exactly 0 or 1 for extreme points.
    pub fn value(&self) -> f64 {
        if self.ln_x < self.ln_complement {
            self.ln_x.exp()
        } else {
            -self.ln_complement.exp_m1()
        }
    }

    /// `1 - x` without cancellation.
    pub fn complement(&self) -> f64 {
        if self.ln_complement < self.ln_x {
            self.ln_complement.exp()
        } else {
            -self.ln_x.exp_m1()
        }
    }

    pub fn ln_value(&self) -> f64 {
        self.ln_x
    }

    pub fn ln_complement(&self) -> f64 {
        self.ln_complement
    }

    pub fn logit(&self) -> f64 {
        self.ln_x - self.ln_complement
    }
}

/// Beta(α, β) prior on part occurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaPrior {
    alpha: f64,
    beta: f64,
    ln_norm: f64,
}

impl BetaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "Beta parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            ln_norm: ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Regularized incomplete beta function `I_x(α, β)`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!("beta_cdf argument {x} outside [0, 1]")));
        }
        if x == 0.0 {
            return Ok(0.0);
        }
        if x == 1.0 {
            return Ok(1.0);
        }
        self.cdf_at(UnitPoint::from_value(x)?)
    }

    /// `I_x(α, β)` evaluated from the log representation of `x`.
    pub fn cdf_at(&self, p: UnitPoint) -> Result<f64> {
        let (a, b) = (self.alpha, self.beta);
        let ln_front = a * p.ln_value() + b * p.ln_complement() - self.ln_norm;
        // Continued fraction converges fast below the mode-like switch point.
        if p.value() <= (a + 1.0) / (a + b + 2.0) {
            let cf = continued_fraction(a, b, p.value())?;
            Ok((ln_front.exp() / a * cf).clamp(0.0, 1.0))
        } else {
            let cf = continued_fraction(b, a, p.complement())?;
            Ok((1.0 - ln_front.exp() / b * cf).clamp(0.0, 1.0))
        }
    }

    /// `ln` of the density of the log-odds `u` at `p`, i.e. `ln(pdf(x) x (1-x))`.
    fn ln_logit_density(&self, p: UnitPoint) -> f64 {
        self.alpha * p.ln_value() + self.beta * p.ln_complement() - self.ln_norm
    }

    /// Inverse CDF: the point `x` with `|I_x(α, β) - z| ≤ 1e-8`.
    pub fn quantile(&self, z: f64) -> Result<UnitPoint> {
        if !(z > 0.0 && z < 1.0) {
            return Err(Error::invalid(format!("beta_quantile level {z} outside (0, 1)")));
        }
        let cdf = |u: f64| self.cdf_at(UnitPoint::from_logit(u));

        // Bracket in logit space by doubling.
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while cdf(lo)? > z {
            lo *= 2.0;
            if lo < -1e9 {
                return Err(self.no_convergence(z, lo, hi, "lower bracket"));
            }
        }
        while cdf(hi)? < z {
            hi *= 2.0;
            if hi > 1e9 {
                return Err(self.no_convergence(z, lo, hi, "upper bracket"));
            }
        }

        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 1e-13 * lo.abs().max(hi.abs()).max(1.0) {
                break;
            }
            if cdf(mid)? < z {
                lo = mid;
            } else {
                hi = mid;
            }
        }

        // Newton polish on u, kept inside the bracket.
        let mut u = 0.5 * (lo + hi);
        for _ in 0..20 {
            let p = UnitPoint::from_logit(u);
            let f = self.cdf_at(p)? - z;
            if f.abs() <= 1e-15 {
                break;
            }
            let slope = self.ln_logit_density(p).exp();
            if !(slope > 0.0 && slope.is_finite()) {
                break;
            }
            let next = u - f / slope;
            if !(next >= lo && next <= hi) || next == u {
                break;
            }
            u = next;
        }

        let p = UnitPoint::from_logit(u);
        let err = (self.cdf_at(p)? - z).abs();
        if err > QUANTILE_TOL {
            return Err(self.no_convergence(z, lo, hi, &format!("residual {err:e}")));
        }
        Ok(p)
    }

    fn no_convergence(&self, z: f64, lo: f64, hi: f64, what: &str) -> Error {
        Error::NoConvergence(format!(
            "Beta({}, {}) quantile at z={z}: {what}; logit bracket [{lo}, {hi}]",
            self.alpha, self.beta
        ))
    }

    /// Prior quantiles at the mid-rank levels `(2n - 1) / 2N`, `n = 1..=N`.
    pub fn midrank_quantiles(&self, count: usize) -> Result<Vec<f64>> {
        (1..=count)
            .map(|n| {
                let z = (2 * n - 1) as f64 / (2 * count) as f64;
                self.quantile(z).map(|p| p.value())
            })
            .collect()
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(Error::NoConvergence(format!(
        "incomplete beta continued fraction for a={a}, b={b}, x={x}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prior(a: f64, b: f64) -> BetaPrior {
        BetaPrior::new(a, b).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert!((prior(1.0, 1.0).cdf(0.3).unwrap() - 0.3).abs() < 1e-14);
        assert!((prior(1.0, 2.0).cdf(0.5).unwrap() - 0.75).abs() < 1e-14);
        assert!((prior(2.0, 2.0).cdf(0.5).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(prior(0.5, 0.5).cdf(0.0).unwrap(), 0.0);
        assert_eq!(prior(0.5, 0.5).cdf(1.0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(BetaPrior::new(0.0, 1.0).is_err());
        assert!(BetaPrior::new(1.0, -2.0).is_err());
        assert!(prior(1.0, 1.0).cdf(1.5).is_err());
        assert!(prior(1.0, 1.0).cdf(-0.1).is_err());
        assert!(prior(1.0, 1.0).quantile(0.0).is_err());
        assert!(prior(1.0, 1.0).quantile(1.0).is_err());
    }

    #[test]
    fn quantile_examples() {
        for z in [0.01, 0.2, 0.5, 0.93] {
            assert!((prior(1.0, 1.0).quantile(z).unwrap().value() - z).abs() < 1e-8);
        }
        assert!((prior(1.0, 2.0).quantile(0.75).unwrap().value() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn agrees_with_statrs_on_moderate_parameters() {
        for &(a, b) in &[(0.5, 0.5), (2.0, 5.0), (7.5, 1.2), (30.0, 40.0), (0.1, 3.0)] {
            for i in 1..40 {
                let x = i as f64 / 40.0;
                let want = statrs::function::beta::beta_reg(a, b, x);
                let got = prior(a, b).cdf(x).unwrap();
                assert!((got - want).abs() < 1e-10, "({a},{b}) at {x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn plain_f64_cannot_hold_extreme_quantiles() {
        // The largest double below 1 only reaches CDF ≈ 0.036 under Beta(1, 1e-3).
        let below_one = 1.0 - f64::EPSILON / 2.0;
        let c = prior(1.0, 1e-3).cdf(below_one).unwrap();
        assert!(c < 0.04, "{c}");
        // ... while the log representation reaches any level.
        let q = prior(1.0, 1e-3).quantile(0.99).unwrap();
        assert_eq!(q.value(), 1.0);
        assert!((prior(1.0, 1e-3).cdf_at(q).unwrap() - 0.99).abs() < 1e-8);
        // Closed form: ln(1 - x) = ln(1 - z) / β.
        assert!((q.ln_complement() - 0.01f64.ln() / 1e-3).abs() < 1e-6 * 4605.0);
    }

    #[test]
    fn tiny_alpha_mass_near_zero() {
        let p = prior(2e-3, 1e-3);
        for i in 1..100 {
            let z = i as f64 / 100.0;
            let q = p.quantile(z).unwrap();
            assert!((p.cdf_at(q).unwrap() - z).abs() < 1e-8, "z={z}");
        }
        // A third of the mass sits below any representable positive double.
        assert_eq!(p.quantile(0.01).unwrap().value(), 0.0);
    }

    proptest! {
        #[test]
        fn quantile_is_increasing_and_inverts_cdf(
            za in 0.001f64..0.999, zb in 0.001f64..0.999,
            which in 0usize..4,
        ) {
            let (a, b) = [(1.0, 1.0), (1.0, 1e-3), (2e-3, 1e-3), (2.0, 2.0)][which];
            let p = prior(a, b);
            let (lo, hi) = if za < zb { (za, zb) } else { (zb, za) };
            prop_assume!(hi - lo > 1e-6);
            let ql = p.quantile(lo).unwrap();
            let qh = p.quantile(hi).unwrap();
            prop_assert!(ql.logit() < qh.logit());
            prop_assert!((p.cdf_at(ql).unwrap() - lo).abs() <= 1e-6);
            prop_assert!((p.cdf_at(qh).unwrap() - hi).abs() <= 1e-6);
        }

        #[test]
        fn cdf_is_monotone(x in 0.0f64..1.0, dx in 0.0f64..0.1, a in 0.05f64..10.0, b in 0.05f64..10.0) {
            let p = prior(a, b);
            let y = (x + dx).min(1.0);
            prop_assert!(p.cdf(x).unwrap() <= p.cdf(y).unwrap() + 1e-12);
        }
    }
}
