//! Closed-form rate predictions and log–log rate fitting.
//!
//! Bounds are evaluated with every absorbed constant set to 1 and the log
//! factor written out as `ln N`. Only their exponents are meant to be
//! compared against simulations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ProblemSpec, Spectrum};

/// Which term of a two-term bound dominates asymptotically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BiasDominated,
    VarianceDominated,
    Balanced,
}

/// Optimal polynomial decay and the rate it achieves for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePrediction {
    pub gamma_star: f64,
    /// Excess risk decays like `N^{-predicted_exponent}`.
    pub predicted_exponent: f64,
    pub k_star: usize,
    pub regime: Regime,
}

/// Predicted exponent together with whether it is covered by the
/// polynomial-decay guarantee (`b ≥ a`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateExponent {
    pub exponent: f64,
    pub within_guarantee: bool,
}

fn check_exponents(a: f64, b: f64) -> Result<()> {
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::param("capacity", a, "must be finite and > 1"));
    }
    if !(b > 1.0) || !b.is_finite() {
        return Err(Error::param("source", b, "must be finite and > 1"));
    }
    Ok(())
}

/// `γ* = max(1 - a/b, 0)`.
pub fn gamma_star(a: f64, b: f64) -> Result<f64> {
    check_exponents(a, b)?;
    Ok((1.0 - a / b).max(0.0))
}

/// Exponent of the excess-risk decay at the optimal schedule.
///
/// For `b ≥ a` this is `1 - 1/b`. For `b < a` the polynomial-decay guarantee
/// does not apply and the bias-limited exponent `(b - 1)/a` of the
/// constant/WSD analysis is returned instead, flagged as such.
pub fn predicted_rate(a: f64, b: f64) -> Result<RateExponent> {
    check_exponents(a, b)?;
    if b >= a {
        Ok(RateExponent {
            exponent: 1.0 - 1.0 / b,
            within_guarantee: true,
        })
    } else {
        Ok(RateExponent {
            exponent: (b - 1.0) / a,
            within_guarantee: false,
        })
    }
}

/// Number of leading eigenvalues at or above `threshold`.
pub fn k_star_for_threshold(eigenvalues: &[f64], threshold: f64) -> usize {
    eigenvalues.partition_point(|&l| l >= threshold)
}

/// `k* = max{k : λ_k ≥ ln N / (η N^{1-γ})}`, or 0 if none qualifies.
pub fn k_star(spectrum: &Spectrum, lr: f64, gamma: f64, n: u64) -> Result<usize> {
    if n < 2 {
        return Err(Error::param("n", n, "must be at least 2"));
    }
    if !(lr > 0.0) {
        return Err(Error::param("lr", lr, "must be > 0"));
    }
    let nf = n as f64;
    let threshold = nf.ln() / (lr * nf.powf(1.0 - gamma));
    Ok(k_star_for_threshold(&spectrum.eigenvalues, threshold))
}

/// Bias and variance parts of the polynomial-decay bound at `s = N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub bias: f64,
    pub variance: f64,
    pub k_star: usize,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.bias + self.variance
    }
}

/// Evaluates
/// `(1/N)‖w*‖²_{1:k*} + ‖w*‖²_{k*:∞} + k*σ²/(ηN) + σ² Σ_{k>k*} (ηλ_k² N^{1-2γ} + λ_k N^{-γ})`.
pub fn poly_decay_bound(
    spectrum: &Spectrum,
    noise_var: f64,
    lr: f64,
    gamma: f64,
    n: u64,
) -> Result<BoundTerms> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::param("gamma", gamma, "must lie in [0, 1)"));
    }
    let ks = k_star(spectrum, lr, gamma, n)?;
    let nf = n as f64;
    let bias = spectrum.head_signal(ks) / nf + spectrum.tail_signal(ks);
    let tail: f64 = spectrum.eigenvalues[ks..]
        .iter()
        .map(|l| lr * l * l * nf.powf(1.0 - 2.0 * gamma) + l * nf.powf(-gamma))
        .sum();
    let variance = ks as f64 * noise_var / (lr * nf) + noise_var * tail;
    Ok(BoundTerms {
        bias,
        variance,
        k_star: ks,
    })
}

/// Terms of the WSD last-iterate bound `N^{-(b-1)/a} + σ² N^{-(a-1)/a}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsdBound {
    pub bias: f64,
    pub variance: f64,
    pub bias_exponent: f64,
    pub variance_exponent: f64,
    pub regime: Regime,
}

pub fn wsd_bound(a: f64, b: f64, n: u64, noise_var: f64) -> Result<WsdBound> {
    if !(a > 1.0 && a < 2.0) {
        return Err(Error::param(
            "capacity",
            a,
            "the WSD bound requires a capacity exponent in (1, 2)",
        ));
    }
    check_exponents(a, b)?;
    let nf = n as f64;
    let bias_exponent = (b - 1.0) / a;
    let variance_exponent = (a - 1.0) / a;
    let regime = if b > a {
        Regime::VarianceDominated
    } else if b < a {
        Regime::BiasDominated
    } else {
        Regime::Balanced
    };
    Ok(WsdBound {
        bias: nf.powf(-bias_exponent),
        variance: noise_var * nf.powf(-variance_exponent),
        bias_exponent,
        variance_exponent,
        regime,
    })
}

/// `γ*`, the predicted exponent and `k*` for a concrete instance.
pub fn predict(spec: &ProblemSpec, spectrum: &Spectrum, lr: f64, n: u64) -> Result<RatePrediction> {
    let (a, b) = (spec.capacity, spec.source);
    let gamma = gamma_star(a, b)?;
    let rate = predicted_rate(a, b)?;
    let regime = if b > a {
        Regime::VarianceDominated
    } else if b < a {
        Regime::BiasDominated
    } else {
        Regime::Balanced
    };
    Ok(RatePrediction {
        gamma_star: gamma,
        predicted_exponent: rate.exponent,
        k_star: k_star(spectrum, lr, gamma, n)?,
        regime,
    })
}

/// Result of a least-squares fit of `ln risk` on `ln N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ln(risk)` against `ln(N)`.
pub fn fit_rate_exponent(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "need at least 4 points for a rate fit, got {}",
            points.len()
        )));
    }
    if let Some(&(n, r)) = points.iter().find(|(n, r)| !(*r > 0.0) || !(*n > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "rate fit needs positive horizons and risks, got ({n}, {r})"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, r)| r.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("rate fit needs distinct horizons".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Checks `(1-α) i^{-α} (i-j) ≤ i^{1-α} - j^{1-α} ≤ j^{-α} (i-j)` for
/// `0 < α ≤ 1`, `1 ≤ j ≤ i`, with a small relative slack for rounding.
pub fn power_difference_bounds_hold(alpha: f64, i: u64, j: u64) -> bool {
    assert!(alpha > 0.0 && alpha <= 1.0 && j >= 1 && j <= i);
    let (fi, fj) = (i as f64, j as f64);
    let gap = fi - fj;
    let mid = fi.powf(1.0 - alpha) - fj.powf(1.0 - alpha);
    let lower = (1.0 - alpha) * fi.powf(-alpha) * gap;
    let upper = fj.powf(-alpha) * gap;
    let slack = 1e-9 * (mid.abs() + upper.abs()) + 1e-12;
    lower <= mid + slack && mid <= upper + slack
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::build_spectrum;
    use proptest::prelude::*;

    #[test]
    fn gamma_star_values() {
        assert_eq!(gamma_star(1.5, 3.0).unwrap(), 0.5);
        assert_eq!(gamma_star(1.5, 1.5).unwrap(), 0.0);
        assert_eq!(gamma_star(1.9, 1.2).unwrap(), 0.0);
        assert!(gamma_star(1.5, 1e9).unwrap() > 0.999_999);
        assert!(gamma_star(1.0, 3.0).is_err());
    }

    #[test]
    fn predicted_rates() {
        let r = predicted_rate(1.5, 3.0).unwrap();
        assert!((r.exponent - 2.0 / 3.0).abs() < 1e-15 && r.within_guarantee);
        assert_eq!(predicted_rate(1.5, 2.0).unwrap().exponent, 0.5);
        let eq = predicted_rate(1.5, 1.5).unwrap();
        let wsd = wsd_bound(1.5, 1.5, 10_000, 0.01).unwrap();
        assert!((eq.exponent - wsd.bias_exponent).abs() < 1e-15);
        assert!((eq.exponent - wsd.variance_exponent).abs() < 1e-15);
        assert!(!predicted_rate(1.9, 1.5).unwrap().within_guarantee);
    }

    #[test]
    fn k_star_explicit_threshold() {
        let lam = [1.0, 0.25, 1.0 / 9.0];
        assert_eq!(k_star_for_threshold(&lam, 0.2), 2);
        assert_eq!(k_star_for_threshold(&lam, 2.0), 0);
        assert_eq!(k_star_for_threshold(&lam, 0.0), 3);
    }

    #[test]
    fn k_star_scaling_law() {
        let (a, gamma, lr) = (1.5, 0.5, 1.0);
        let s = build_spectrum(&ProblemSpec::new(200_000, a, 3.0, 0.0)).unwrap();
        let pts: Vec<(f64, f64)> = (10..=20)
            .map(|k| {
                let n = 1u64 << k;
                (n as f64, k_star(&s, lr, gamma, n).unwrap() as f64)
            })
            .collect();
        let fit = fit_rate_exponent(&pts).unwrap();
        // The ln N in the threshold bends the slope slightly below (1-γ)/a.
        assert!((fit.slope - (1.0 - gamma) / a).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn poly_decay_bound_noise_free_and_finite_dim() {
        let spec = ProblemSpec::new(5, 2.0, 3.0, 0.1);
        let s = build_spectrum(&spec).unwrap();
        assert_eq!(poly_decay_bound(&s, 0.0, 0.5, 0.5, 1 << 20).unwrap().variance, 0.0);
        let n = 1u64 << 30;
        let b = poly_decay_bound(&s, 0.1, 0.5, 0.5, n).unwrap();
        assert_eq!(b.k_star, 5);
        let nf = n as f64;
        let reduced = s.head_signal(5) / nf + 5.0 * 0.1 / (0.5 * nf);
        assert!((b.total() - reduced).abs() <= 1e-12 * reduced);
    }

    #[test]
    fn wsd_bound_cases() {
        let w = wsd_bound(1.5, 3.0, 100, 0.01).unwrap();
        assert!((w.bias_exponent - 4.0 / 3.0).abs() < 1e-15);
        assert!((w.variance_exponent - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.regime, Regime::VarianceDominated);
        assert_eq!(wsd_bound(1.5, 1.2, 100, 0.01).unwrap().regime, Regime::BiasDominated);
        assert_eq!(wsd_bound(1.5, 1.5, 100, 0.01).unwrap().regime, Regime::Balanced);
        assert_eq!(wsd_bound(1.5, 3.0, 100, 0.0).unwrap().variance, 0.0);
        let err = wsd_bound(2.5, 3.0, 100, 0.01).unwrap_err().to_string();
        assert!(err.contains("(1, 2)"));
    }

    #[test]
    fn fit_exact_power_laws() {
        let pts: Vec<(f64, f64)> = (10..=16).map(|k| {
            let n = (1u64 << k) as f64;
            (n, n.powf(-2.0 / 3.0))
        }).collect();
        let fit = fit_rate_exponent(&pts).unwrap();
        assert!((fit.slope + 2.0 / 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let scaled: Vec<(f64, f64)> = pts.iter().map(|(n, _)| (*n, 7.3 * n.powf(-0.5))).collect();
        assert!((fit_rate_exponent(&scaled).unwrap().slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_rate_exponent(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
        assert!(fit_rate_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn gamma_star_monotone_in_source(a in 1.01f64..3.0, b1 in 1.01f64..10.0, db in 0.0f64..5.0) {
            let g1 = gamma_star(a, b1).unwrap();
            let g2 = gamma_star(a, b1 + db).unwrap();
            prop_assert!(g2 >= g1);
            prop_assert!((0.0..1.0).contains(&g1));
            if b1 <= a {
                prop_assert_eq!(g1, 0.0);
            }
        }

        #[test]
        fn bounds_are_homogeneous_in_noise(a in 1.05f64..1.95, b in 1.05f64..4.0, s2 in 0.001f64..1.0, k in 8u32..20) {
            let n = 1u64 << k;
            let w1 = wsd_bound(a, b, n, s2).unwrap();
            let w2 = wsd_bound(a, b, n, 2.0 * s2).unwrap();
            prop_assert_eq!(w1.bias, w2.bias);
            prop_assert!((w2.variance - 2.0 * w1.variance).abs() <= 1e-12 * w2.variance);
            let s = build_spectrum(&ProblemSpec::new(500, a, b, 0.0)).unwrap();
            let t1 = poly_decay_bound(&s, s2, 0.1, 0.5, n).unwrap();
            let t2 = poly_decay_bound(&s, 2.0 * s2, 0.1, 0.5, n).unwrap();
            prop_assert_eq!(t1.bias, t2.bias);
            prop_assert!((t2.variance - 2.0 * t1.variance).abs() <= 1e-12 * t2.variance);
        }

        #[test]
        fn power_difference_inequality(alpha in 0.001f64..=1.0, i in 1u64..=1_000_000, frac in 0.0f64..=1.0) {
            let j = ((i as f64 * frac).floor() as u64).clamp(1, i);
            prop_assert!(power_difference_bounds_hold(alpha, i, j));
        }
    }
}
