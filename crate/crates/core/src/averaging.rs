//! Exact second moments of averaged iterates.
//!
//! Two averaging families are tracked alongside the iterate moments `m`:
//!
//! * EMAs whose half-life grows with time. The retention at step `t` is
//!   `ρ_t = (1/2)^{f/t}`, so the half-life is `t / f` steps. The moments of the
//!   average (`v`) and its cross term with the iterate (`c`) close exactly in
//!   the diagonal model.
//! * Uniform tail windows `w̄ = (1/T) Σ_{i=s}^{s+T-1} w_i`, evaluated through
//!   the cross moments `E[e_j e_iᵀ]_kk = ∏_{t=i+1}^{j} (1 - η_t λ_k) m_{i,k}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, CHUNK};

/// When the EMA absorbs the iterate relative to the SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Absorb `w_{t-1}` and then take step `t`.
    BeforeStep,
    /// Take step `t` and then absorb `w_t`.
    #[default]
    AfterStep,
}

/// An averaging rule applied to the SGD iterates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AveragingConfig {
    /// Last iterate.
    None,
    /// Uniform average over the last `fraction` of the iterates seen so far.
    TailFraction { fraction: f64 },
    /// Uniform average of `w_start, …, w_t`.
    TailFromStep { start: u64 },
    /// EMA with half-life `t / f`; `f = 0` means the last iterate.
    Ema {
        f: f64,
        #[serde(default)]
        update_order: UpdateOrder,
    },
}

impl AveragingConfig {
    pub fn ema(f: f64) -> Self {
        AveragingConfig::Ema {
            f,
            update_order: UpdateOrder::AfterStep,
        }
    }

    pub fn tail(fraction: f64) -> Self {
        AveragingConfig::TailFraction { fraction }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AveragingConfig::None => Ok(()),
            AveragingConfig::TailFraction { fraction } => {
                if fraction > 0.0 && fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::param("fraction", fraction, "must lie in (0, 1]"))
                }
            }
            AveragingConfig::TailFromStep { start } => {
                if start >= 1 {
                    Ok(())
                } else {
                    Err(Error::param("start", start, "must be at least 1"))
                }
            }
            AveragingConfig::Ema { f, .. } => {
                if f >= 0.0 && f.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("f", f, "must be finite and >= 0"))
                }
            }
        }
    }

    /// True when the rule reduces to reporting the last iterate.
    pub fn is_last_iterate(&self) -> bool {
        match *self {
            AveragingConfig::None => true,
            AveragingConfig::Ema { f, .. } => f == 0.0,
            _ => false,
        }
    }

    /// Column label, e.g. `avg_f6.25`, `tail_0.5`.
    pub fn label(&self) -> String {
        match *self {
            AveragingConfig::None => "avg_none".to_string(),
            AveragingConfig::TailFraction { fraction } => format!("tail_{fraction}"),
            AveragingConfig::TailFromStep { start } => format!("tail_from_{start}"),
            AveragingConfig::Ema { f, update_order } => match update_order {
                UpdateOrder::AfterStep => format!("avg_f{f}"),
                UpdateOrder::BeforeStep => format!("avg_f{f}_pre"),
            },
        }
    }

    /// First iterate of the tail window ending at step `t`, for tail rules.
    pub fn window_start(&self, t: u64) -> Option<u64> {
        match *self {
            AveragingConfig::TailFraction { fraction } => {
                if t == 0 {
                    return Some(0);
                }
                let len = ((fraction * t as f64) - 1e-9).ceil().clamp(1.0, t as f64) as u64;
                Some(t - len + 1)
            }
            AveragingConfig::TailFromStep { start } => Some(start),
            _ => None,
        }
    }
}

/// Retention `ρ_t = (1/2)^{f/t}` of the old average at step `t`.
/// The new iterate receives weight `1 - ρ_t`.
pub fn ema_retention(f: f64, t: u64) -> Result<f64> {
    if !(f >= 0.0) || !f.is_finite() {
        return Err(Error::param("f", f, "must be finite and >= 0"));
    }
    if t == 0 {
        return Err(Error::StepOutOfRange {
            step: 0,
            reason: "steps are 1-indexed".into(),
        });
    }
    Ok(0.5f64.powf(f / t as f64))
}

/// One step of the coupled `(m, v, c)` dynamics in after-step order.
///
/// `m` holds the iterate moments before the step and `m_next` after it.
/// The cross term is first carried through the SGD contraction, then the
/// EMA absorbs the new iterate.
pub fn step_ema_moments(
    m_next: &[f64],
    v: &[f64],
    c: &[f64],
    eigenvalues: &[f64],
    lr: f64,
    retention: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut v2 = v.to_vec();
    let mut c2 = c.to_vec();
    ema_after_step(&mut v2, &mut c2, m_next, eigenvalues, lr, retention);
    (v2, c2)
}

pub(crate) fn ema_after_step(
    v: &mut [f64],
    c: &mut [f64],
    m_next: &[f64],
    eigenvalues: &[f64],
    lr: f64,
    rho: f64,
) {
    let keep = 1.0 - rho;
    for k in 0..v.len() {
        let ck = (1.0 - lr * eigenvalues[k]) * c[k];
        let vk = rho * rho * v[k] + 2.0 * rho * keep * ck + keep * keep * m_next[k];
        debug_assert!(vk >= -1e-14, "negative averaged moment {vk} at coordinate {k}");
        v[k] = vk.max(0.0);
        c[k] = rho * ck + keep * m_next[k];
    }
}

pub(crate) fn ema_before_step(
    v: &mut [f64],
    c: &mut [f64],
    m_prev: &[f64],
    eigenvalues: &[f64],
    lr: f64,
    rho: f64,
) {
    let keep = 1.0 - rho;
    for k in 0..v.len() {
        let vk = rho * rho * v[k] + 2.0 * rho * keep * c[k] + keep * keep * m_prev[k];
        debug_assert!(vk >= -1e-14, "negative averaged moment {vk} at coordinate {k}");
        v[k] = vk.max(0.0);
        c[k] = (1.0 - lr * eigenvalues[k]) * (rho * c[k] + keep * m_prev[k]);
    }
}

/// Running state for a uniform window starting at a fixed step.
///
/// Keeps `A_{t,k} = (1 - η_t λ_k) A_{t-1,k} + m_{t,k}` and the scalar
/// `S_t = Σ_{j≤t} Σ_k λ_k (2 A_{j,k} - m_{j,k})`, which is `Σ_{i,j} λ·E[e_i ∘ e_j]`
/// over the window. Any window end can be read off without storing history.
#[derive(Debug, Clone)]
pub struct WindowAccumulator {
    start: u64,
    last: u64,
    acc: Vec<f64>,
    total: f64,
    partials: Vec<f64>,
}

impl WindowAccumulator {
    pub fn new(start: u64, dimension: usize) -> Self {
        Self {
            start,
            last: start.saturating_sub(1),
            acc: vec![0.0; dimension],
            total: 0.0,
            partials: Vec::with_capacity(dimension.div_ceil(CHUNK)),
        }
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    /// Absorbs iterate moments `m_t`, where step `t` used learning rate `lr`.
    pub fn absorb(&mut self, t: u64, m: &[f64], eigenvalues: &[f64], lr: f64) {
        debug_assert_eq!(t, self.last + 1);
        self.partials.clear();
        let first = t == self.start;
        for ((a, mk), lam) in self
            .acc
            .chunks_mut(CHUNK)
            .zip(m.chunks(CHUNK))
            .zip(eigenvalues.chunks(CHUNK))
        {
            let mut part = 0.0;
            for k in 0..a.len() {
                let prev = if first { 0.0 } else { (1.0 - lr * lam[k]) * a[k] };
                a[k] = prev + mk[k];
                part += lam[k] * (2.0 * a[k] - mk[k]);
            }
            self.partials.push(part);
        }
        self.total += pairwise_sum(&self.partials);
        self.last = t;
    }

    /// Number of iterates absorbed.
    pub fn len(&self) -> u64 {
        self.last + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Excess risk of the window average `½ S / T²`.
    pub fn risk(&self) -> f64 {
        let n = self.len() as f64;
        0.5 * self.total / (n * n)
    }
}

/// Excess risk of the uniform average of a stored window of iterate moments.
///
/// `moments[j]` holds `m` for the `j`-th iterate in the window and
/// `lrs[j]` the learning rate of the step that produced it (the first entry
/// of `lrs` is unused).
pub fn tail_average_risk(moments: &[Vec<f64>], eigenvalues: &[f64], lrs: &[f64]) -> Result<f64> {
    if moments.is_empty() {
        return Err(Error::InvalidInput("empty averaging window".into()));
    }
    if lrs.len() != moments.len() {
        return Err(Error::InvalidInput(format!(
            "window has {} moment vectors but {} learning rates",
            moments.len(),
            lrs.len()
        )));
    }
    if moments.iter().any(|m| m.len() != eigenvalues.len()) {
        return Err(Error::InvalidInput("moment dimension mismatch".into()));
    }
    let mut acc = WindowAccumulator::new(1, eigenvalues.len());
    for (j, m) in moments.iter().enumerate() {
        acc.absorb(j as u64 + 1, m, eigenvalues, lrs[j]);
    }
    Ok(acc.risk())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct `(i, j)` double sum of the cross moments.
    fn brute_force_window(moments: &[Vec<f64>], eigenvalues: &[f64], lrs: &[f64]) -> f64 {
        let n = moments.len();
        let mut total = 0.0;
        for (k, lam) in eigenvalues.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
                    let mut prod = 1.0;
                    for lr in &lrs[lo + 1..=hi] {
                        prod *= 1.0 - lr * lam;
                    }
                    total += lam * prod * moments[lo][k];
                }
            }
        }
        0.5 * total / (n * n) as f64
    }

    #[test]
    fn retention_values() {
        assert_eq!(ema_retention(10.0, 10).unwrap(), 0.5);
        assert!((ema_retention(6.25, 625).unwrap() - 0.993_092).abs() < 1e-6);
        assert!(ema_retention(1.0, 1_000_000_000).unwrap() > 0.999_999);
        assert!(ema_retention(-1.0, 3).is_err());
        assert!(ema_retention(1.0, 0).is_err());
    }

    #[test]
    fn ema_extremes() {
        let m_next = [0.7, 0.2];
        let lam = [1.0, 0.5];
        let (v, c) = step_ema_moments(&m_next, &[1.0, 1.0], &[0.9, 0.8], &lam, 0.1, 0.0);
        assert_eq!(v, m_next.to_vec());
        assert_eq!(c, m_next.to_vec());
        let (v, c) = step_ema_moments(&m_next, &[1.0, 1.0], &[0.9, 0.8], &lam, 0.1, 1.0);
        assert_eq!(v, vec![1.0, 1.0]);
        assert!((c[0] - 0.81).abs() < 1e-15 && (c[1] - 0.76).abs() < 1e-15);
    }

    #[test]
    fn ema_hand_example() {
        let (v, c) = step_ema_moments(&[0.83], &[1.0], &[1.0], &[1.0], 0.1, 0.5);
        assert!((v[0] - 0.9075).abs() < 1e-14);
        assert!((c[0] - 0.865).abs() < 1e-14);
    }

    #[test]
    fn single_iterate_window() {
        let r = tail_average_risk(&[vec![2.0, 4.0]], &[1.0, 0.25], &[0.3]).unwrap();
        assert!((r - 0.5 * (2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_window_is_constant() {
        let window = vec![vec![3.0]; 5];
        let r = tail_average_risk(&window, &[1.0], &[0.0; 5]).unwrap();
        assert!((r - 1.5).abs() < 1e-14);
    }

    #[test]
    fn empty_window_rejected() {
        assert!(tail_average_risk(&[], &[1.0], &[]).is_err());
        assert!(tail_average_risk(&[vec![1.0]], &[1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn small_instance_matches_double_sum() {
        let window = vec![vec![0.9, 1.3], vec![0.4, 1.1], vec![0.35, 0.7]];
        let lam = [1.0, 0.3];
        let lrs = [0.0, 0.2, 0.15];
        let fast = tail_average_risk(&window, &lam, &lrs).unwrap();
        let slow = brute_force_window(&window, &lam, &lrs);
        assert!((fast - slow).abs() <= 1e-12 * slow.abs());
    }

    #[test]
    fn window_starts() {
        let tail = AveragingConfig::tail(0.25);
        assert_eq!(tail.window_start(1000), Some(751));
        assert_eq!(AveragingConfig::tail(1.0).window_start(7), Some(1));
        assert_eq!(AveragingConfig::tail(0.01).window_start(10), Some(10));
        assert_eq!(AveragingConfig::ema(1.0).window_start(10), None);
    }

    #[test]
    fn labels_and_serde() {
        assert_eq!(AveragingConfig::ema(6.25).label(), "avg_f6.25");
        assert_eq!(AveragingConfig::ema(0.0).label(), "avg_f0");
        assert_eq!(AveragingConfig::tail(1.0).label(), "tail_1");
        let json = r#"{"kind":"ema","f":12.5}"#;
        let cfg: AveragingConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, AveragingConfig::ema(12.5));
        assert!(serde_json::from_str::<AveragingConfig>(r#"{"kind":"ema","f":1,"x":2}"#).is_err());
        assert!(AveragingConfig::ema(0.0).is_last_iterate());
        assert!(!AveragingConfig::tail(1.0).is_last_iterate());
    }

    proptest! {
        #[test]
        fn accumulator_equals_double_sum(
            d in 1usize..4,
            n in 1usize..7,
            seed in proptest::collection::vec(0.0f64..2.0, 40),
            lrs in proptest::collection::vec(0.0f64..0.9, 7),
        ) {
            let lam: Vec<f64> = (0..d).map(|k| 1.0 / (k + 1) as f64).collect();
            let window: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|k| seed[i * 4 + k]).collect()).collect();
            let lrs = &lrs[..n];
            let fast = tail_average_risk(&window, &lam, lrs).unwrap();
            let slow = brute_force_window(&window, &lam, lrs);
            prop_assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1e-12), "{} vs {}", fast, slow);
        }
    }
}
