//! Learning-rate schedules.
//!
//! Steps are 1-indexed: step `t` moves the iterate from `w_{t-1}` to `w_t`
//! using `lr_at(t)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Shape of a schedule, independent of its base learning rate.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// `η t^{-γ}`.
    PolyDecay { gamma: f64 },
    /// `η √(α / (t + α))`.
    SqrtAlpha { alpha: f64 },
    /// Linear warmup over `warmup_frac · T` steps, then half-cosine down to
    /// `floor_frac · η` at `T`.
    Cosine {
        horizon: u64,
        warmup_frac: f64,
        floor_frac: f64,
    },
    /// Constant until `decay_start_frac · T`, then linear down to
    /// `floor_frac · η` at `T`.
    Wsd {
        decay_start_frac: f64,
        horizon: u64,
        floor_frac: f64,
    },
    /// `η max(φ, 1 - (1 - φ) t / T)`.
    LinearDecay { horizon: u64, floor_frac: f64 },
    /// Explicit per-step multipliers; step `t` uses entry `t - 1`.
    Table(Vec<f64>),
}

/// A learning-rate schedule: a shape and a base learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, base_lr: f64) -> Result<Self> {
        let s = Self { kind, base_lr };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(base_lr: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, base_lr)
    }

    pub fn poly_decay(base_lr: f64, gamma: f64) -> Result<Self> {
        Self::new(ScheduleKind::PolyDecay { gamma }, base_lr)
    }

    pub fn sqrt_alpha(base_lr: f64, alpha: f64) -> Result<Self> {
        Self::new(ScheduleKind::SqrtAlpha { alpha }, base_lr)
    }

    /// Cosine with no warmup and zero floor.
    pub fn cosine(base_lr: f64, horizon: u64) -> Result<Self> {
        Self::new(
            ScheduleKind::Cosine {
                horizon,
                warmup_frac: 0.0,
                floor_frac: 0.0,
            },
            base_lr,
        )
    }

    pub fn wsd(base_lr: f64, decay_start_frac: f64, horizon: u64, floor_frac: f64) -> Result<Self> {
        Self::new(
            ScheduleKind::Wsd {
                decay_start_frac,
                horizon,
                floor_frac,
            },
            base_lr,
        )
    }

    pub fn linear_decay(base_lr: f64, horizon: u64, floor_frac: f64) -> Result<Self> {
        Self::new(ScheduleKind::LinearDecay { horizon, floor_frac }, base_lr)
    }

    /// Explicit step table, used verbatim (base learning rate 1).
    pub fn table(steps: Vec<f64>) -> Result<Self> {
        Self::new(ScheduleKind::Table(steps), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::param("base_lr", self.base_lr, "must be finite and > 0"));
        }
        let unit = |field: &'static str, v: f64, lo_open: bool, hi_open: bool| -> Result<()> {
            let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
            let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
            if lo_ok && hi_ok {
                Ok(())
            } else {
                let range = format!(
                    "must lie in {}0, 1{}",
                    if lo_open { "(" } else { "[" },
                    if hi_open { ")" } else { "]" }
                );
                Err(Error::param(field, v, range))
            }
        };
        let horizon = |h: u64| -> Result<()> {
            if h == 0 {
                Err(Error::param("horizon", h, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            ScheduleKind::Constant => Ok(()),
            ScheduleKind::PolyDecay { gamma } => unit("gamma", *gamma, true, true),
            ScheduleKind::SqrtAlpha { alpha } => {
                if *alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("alpha", alpha, "must be finite and > 0"))
                }
            }
            ScheduleKind::Cosine {
                horizon: h,
                warmup_frac,
                floor_frac,
            } => {
                horizon(*h)?;
                unit("warmup_frac", *warmup_frac, false, true)?;
                unit("floor_frac", *floor_frac, false, false)
            }
            ScheduleKind::Wsd {
                decay_start_frac,
                horizon: h,
                floor_frac,
            } => {
                horizon(*h)?;
                unit("decay_start_frac", *decay_start_frac, true, true)?;
                unit("floor_frac", *floor_frac, false, false)
            }
            ScheduleKind::LinearDecay { horizon: h, floor_frac } => {
                horizon(*h)?;
                unit("floor_frac", *floor_frac, false, false)
            }
            ScheduleKind::Table(steps) => {
                if steps.is_empty() {
                    return Err(Error::param("table", "[]", "must be nonempty"));
                }
                match steps.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
                    Some(bad) => Err(Error::param("table", bad, "entries must be finite and >= 0")),
                    None => Ok(()),
                }
            }
        }
    }

    /// Same shape with a different base learning rate.
    pub fn with_base_lr(&self, base_lr: f64) -> Result<Self> {
        Self::new(self.kind.clone(), base_lr)
    }

    /// Shape parameter used for deterministic tie-breaking (`γ`, `α`, or the
    /// decay start fraction); 0 for shapes without one.
    pub fn shape_param(&self) -> f64 {
        match &self.kind {
            ScheduleKind::PolyDecay { gamma } => *gamma,
            ScheduleKind::SqrtAlpha { alpha } => *alpha,
            ScheduleKind::Wsd {
                decay_start_frac, ..
            } => *decay_start_frac,
            _ => 0.0,
        }
    }

    /// Horizon `T` for schedules that need one.
    pub fn horizon(&self) -> Option<u64> {
        match &self.kind {
            ScheduleKind::Cosine { horizon, .. }
            | ScheduleKind::Wsd { horizon, .. }
            | ScheduleKind::LinearDecay { horizon, .. } => Some(*horizon),
            ScheduleKind::Table(steps) => Some(steps.len() as u64),
            _ => None,
        }
    }

    /// Whether evaluating the schedule requires knowing the total horizon.
    /// Schedules for which this is false are "anytime".
    pub fn horizon_dependent(&self) -> bool {
        self.horizon().is_some()
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t == 0 {
            return Err(Error::StepOutOfRange {
                step: 0,
                reason: "steps are 1-indexed".into(),
            });
        }
        if let Some(h) = self.horizon() {
            if t > h {
                return Err(Error::StepOutOfRange {
                    step: t,
                    reason: format!("beyond the schedule horizon {h}"),
                });
            }
        }
        Ok(self.lr_unchecked(t))
    }

    /// `lr_at` without range checks; `t` must be in `1..=horizon`.
    pub(crate) fn lr_unchecked(&self, t: u64) -> f64 {
        let eta = self.base_lr;
        let tf = t as f64;
        match &self.kind {
            ScheduleKind::Constant => eta,
            ScheduleKind::PolyDecay { gamma } => eta * tf.powf(-gamma),
            ScheduleKind::SqrtAlpha { alpha } => eta * (alpha / (tf + alpha)).sqrt(),
            ScheduleKind::Cosine {
                horizon,
                warmup_frac,
                floor_frac,
            } => {
                let big_t = *horizon as f64;
                let warm = warmup_frac * big_t;
                if tf <= warm {
                    eta * tf / warm
                } else {
                    let progress = (tf - warm) / (big_t - warm);
                    eta * (floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + (PI * progress).cos()))
                }
            }
            ScheduleKind::Wsd {
                decay_start_frac,
                horizon,
                floor_frac,
            } => {
                let big_t = *horizon as f64;
                let t0 = decay_start_frac * big_t;
                if tf <= t0 {
                    eta
                } else {
                    eta * (1.0 - (1.0 - floor_frac) * (tf - t0) / (big_t - t0))
                }
            }
            ScheduleKind::LinearDecay { horizon, floor_frac } => {
                let frac = 1.0 - tf / *horizon as f64 * (1.0 - floor_frac);
                eta * frac.max(*floor_frac)
            }
            ScheduleKind::Table(steps) => eta * steps[(t - 1) as usize],
        }
    }

    /// Exact `Σ_{s=t_from}^{t_to} η_s` by compensated accumulation.
    pub fn cumulative_lr(&self, t_from: u64, t_to: u64) -> Result<f64> {
        if t_from == 0 || t_from > t_to {
            return Err(Error::InvalidInput(format!(
                "invalid step range [{t_from}, {t_to}]"
            )));
        }
        self.lr_at(t_to)?;
        Ok((t_from..=t_to)
            .map(|t| self.lr_unchecked(t))
            .collect::<CompensatedSum>()
            .value())
    }

    /// Short label used in CSV headers and reports.
    pub fn label(&self) -> String {
        let eta = self.base_lr;
        match &self.kind {
            ScheduleKind::Constant => format!("constant(lr={eta})"),
            ScheduleKind::PolyDecay { gamma } => format!("poly(lr={eta},gamma={gamma})"),
            ScheduleKind::SqrtAlpha { alpha } => format!("sqrt_alpha(lr={eta},alpha={alpha})"),
            ScheduleKind::Cosine {
                horizon,
                warmup_frac,
                floor_frac,
            } => format!("cosine(lr={eta},T={horizon},warmup={warmup_frac},floor={floor_frac})"),
            ScheduleKind::Wsd {
                decay_start_frac,
                horizon,
                floor_frac,
            } => format!("wsd(lr={eta},rho={decay_start_frac},T={horizon},floor={floor_frac})"),
            ScheduleKind::LinearDecay { horizon, floor_frac } => {
                format!("linear(lr={eta},T={horizon},floor={floor_frac})")
            }
            ScheduleKind::Table(steps) => format!("table(n={})", steps.len()),
        }
    }
}

/// Step-size table whose final iterate reproduces the uniform average of a
/// constant-`η` run on the scalar mean-estimation problem.
///
/// The averaged run places weight `ã_k = (1 - (1-η)^{N-k}) / N` on sample `k`.
/// The final iterate of `w_k = (1-η_k) w_{k-1} + η_k x_k` places weight
/// `η_k ∏_{s>k} (1-η_s)`; matching the two gives
/// `η_k = ã_k / (1 - Σ_{s>k} ã_s)`.
pub fn derived_equivalent_schedule(eta: f64, n: usize) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param("eta", eta, "must lie in (0, 1)"));
    }
    if n == 0 {
        return Err(Error::param("n", 0, "must be at least 1"));
    }
    let weights = averaged_constant_weights(eta, n);
    let mut steps = vec![0.0; n];
    let mut later = CompensatedSum::new();
    for k in (0..n).rev() {
        let denom = 1.0 - later.value();
        assert!(
            denom > 0.0,
            "nonpositive denominator {denom} at t = {} (N = {n}, eta = {eta})",
            k + 1
        );
        steps[k] = weights[k] / denom;
        later.add(weights[k]);
    }
    Ok(steps)
}

/// `ã_k = (1 - (1-η)^{N-k}) / N` for `k = 1..=N`.
pub fn averaged_constant_weights(eta: f64, n: usize) -> Vec<f64> {
    let nf = n as f64;
    (1..=n)
        .map(|k| -(((n - k) as f64) * (-eta).ln_1p()).exp_m1() / nf)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    kind: String,
    #[serde(default = "default_base_lr")]
    base_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    warmup_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    floor_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decay_start_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps: Option<Vec<f64>>,
}

fn default_base_lr() -> f64 {
    1.0
}

impl TryFrom<ScheduleDoc> for Schedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        fn need<T>(v: Option<T>, field: &'static str, kind: &str) -> Result<T> {
            v.ok_or_else(|| Error::param(field, "missing", format!("required for kind `{kind}`")))
        }
        let k = doc.kind.as_str();
        let kind = match k {
            "constant" => ScheduleKind::Constant,
            "poly_decay" => ScheduleKind::PolyDecay {
                gamma: need(doc.gamma, "gamma", k)?,
            },
            "sqrt_alpha" => ScheduleKind::SqrtAlpha {
                alpha: need(doc.alpha, "alpha", k)?,
            },
            "cosine" => ScheduleKind::Cosine {
                horizon: need(doc.horizon, "horizon", k)?,
                warmup_frac: doc.warmup_frac.unwrap_or(0.0),
                floor_frac: doc.floor_frac.unwrap_or(0.0),
            },
            "wsd" => ScheduleKind::Wsd {
                decay_start_frac: need(doc.decay_start_frac, "decay_start_frac", k)?,
                horizon: need(doc.horizon, "horizon", k)?,
                floor_frac: doc.floor_frac.unwrap_or(0.0),
            },
            "linear_decay" => ScheduleKind::LinearDecay {
                horizon: need(doc.horizon, "horizon", k)?,
                floor_frac: doc.floor_frac.unwrap_or(0.0),
            },
            "table" => ScheduleKind::Table(need(doc.steps, "steps", k)?),
            other => {
                return Err(Error::param(
                    "kind",
                    other,
                    "expected one of constant, poly_decay, sqrt_alpha, cosine, wsd, linear_decay, table",
                ))
            }
        };
        Schedule::new(kind, doc.base_lr)
    }
}

impl From<Schedule> for ScheduleDoc {
    fn from(s: Schedule) -> Self {
        let mut doc = ScheduleDoc {
            kind: String::new(),
            base_lr: s.base_lr,
            gamma: None,
            alpha: None,
            horizon: None,
            warmup_frac: None,
            floor_frac: None,
            decay_start_frac: None,
            steps: None,
        };
        doc.kind = match s.kind {
            ScheduleKind::Constant => "constant",
            ScheduleKind::PolyDecay { gamma } => {
                doc.gamma = Some(gamma);
                "poly_decay"
            }
            ScheduleKind::SqrtAlpha { alpha } => {
                doc.alpha = Some(alpha);
                "sqrt_alpha"
            }
            ScheduleKind::Cosine {
                horizon,
                warmup_frac,
                floor_frac,
            } => {
                doc.horizon = Some(horizon);
                doc.warmup_frac = Some(warmup_frac);
                doc.floor_frac = Some(floor_frac);
                "cosine"
            }
            ScheduleKind::Wsd {
                decay_start_frac,
                horizon,
                floor_frac,
            } => {
                doc.decay_start_frac = Some(decay_start_frac);
                doc.horizon = Some(horizon);
                doc.floor_frac = Some(floor_frac);
                "wsd"
            }
            ScheduleKind::LinearDecay { horizon, floor_frac } => {
                doc.horizon = Some(horizon);
                doc.floor_frac = Some(floor_frac);
                "linear_decay"
            }
            ScheduleKind::Table(steps) => {
                doc.steps = Some(steps);
                "table"
            }
        }
        .to_string();
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wsd_theoretical_variant() {
        let s = Schedule::wsd(0.1, 0.5, 100, 0.0).unwrap();
        assert_eq!(s.lr_at(50).unwrap(), 0.1);
        assert!((s.lr_at(75).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn wsd_practical_floor() {
        let s = Schedule::wsd(1.0, 0.9, 100, 0.1).unwrap();
        assert!((s.lr_at(100).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn simple_kinds() {
        assert_eq!(Schedule::poly_decay(1.0, 0.5).unwrap().lr_at(4).unwrap(), 0.5);
        let v = Schedule::sqrt_alpha(1.0, 400.0).unwrap().lr_at(400).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(Schedule::constant(0.3).unwrap().lr_at(1_000_000).unwrap(), 0.3);
        let lin = Schedule::linear_decay(1.0, 10, 0.0).unwrap();
        assert!((lin.lr_at(5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lin.lr_at(10).unwrap(), 0.0);
    }

    #[test]
    fn cosine_warmup_and_floor() {
        let s = Schedule::new(
            ScheduleKind::Cosine {
                horizon: 100,
                warmup_frac: 0.1,
                floor_frac: 0.2,
            },
            1.0,
        )
        .unwrap();
        assert!((s.lr_at(5).unwrap() - 0.5).abs() < 1e-15);
        assert!((s.lr_at(10).unwrap() - 1.0).abs() < 1e-15);
        assert!((s.lr_at(55).unwrap() - 0.6).abs() < 1e-12);
        assert!((s.lr_at(100).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn step_zero_rejected() {
        assert!(Schedule::constant(1.0).unwrap().lr_at(0).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Schedule::poly_decay(1.0, 1.5).is_err());
        assert!(Schedule::poly_decay(1.0, 0.0).is_err());
        assert!(Schedule::sqrt_alpha(1.0, 0.0).is_err());
        assert!(Schedule::wsd(1.0, 1.0, 10, 0.0).is_err());
        assert!(Schedule::cosine(1.0, 0).is_err());
        assert!(Schedule::constant(-1.0).is_err());
    }

    #[test]
    fn anytime_flag() {
        assert!(!Schedule::constant(1.0).unwrap().horizon_dependent());
        assert!(!Schedule::poly_decay(1.0, 0.5).unwrap().horizon_dependent());
        assert!(!Schedule::sqrt_alpha(1.0, 10.0).unwrap().horizon_dependent());
        assert!(Schedule::cosine(1.0, 10).unwrap().horizon_dependent());
        assert!(Schedule::wsd(1.0, 0.5, 10, 0.0).unwrap().horizon_dependent());
        assert!(Schedule::linear_decay(1.0, 10, 0.0).unwrap().horizon_dependent());
    }

    #[test]
    fn cumulative_sums() {
        let c = Schedule::constant(0.1).unwrap();
        assert!((c.cumulative_lr(1, 10).unwrap() - 1.0).abs() < 1e-15);
        let p = Schedule::poly_decay(1.0, 0.5).unwrap();
        assert!((p.cumulative_lr(1, 4).unwrap() - 2.784_457_05).abs() < 1e-8);
        assert!(p.cumulative_lr(5, 4).is_err());
        assert!(p.cumulative_lr(0, 4).is_err());
    }

    #[test]
    fn inverse_sqrt_cumulative_scales_like_sqrt() {
        let p = Schedule::poly_decay(1.0, 0.5).unwrap();
        let ratios: Vec<f64> = (10..=20)
            .map(|k| {
                let n = 1u64 << k;
                p.cumulative_lr(1, n).unwrap() / (n as f64).sqrt()
            })
            .collect();
        for w in ratios.windows(2) {
            assert!((w[1] / w[0] - 1.0).abs() < 0.01, "{ratios:?}");
        }
    }

    #[test]
    fn large_alpha_mimics_constant() {
        let s = Schedule::sqrt_alpha(0.7, 1e9).unwrap();
        for t in 1..=10_000 {
            assert!((s.lr_at(t).unwrap() - 0.7).abs() / 0.7 < 1e-4);
        }
    }

    #[test]
    fn derived_schedule_small_cases() {
        assert_eq!(derived_equivalent_schedule(0.3, 1).unwrap(), vec![0.0]);
        let s = derived_equivalent_schedule(0.5, 2).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert!(derived_equivalent_schedule(1.0, 5).is_err());
        assert!(derived_equivalent_schedule(0.0, 5).is_err());
    }

    #[test]
    fn serde_round_trip_and_unknown_keys() {
        let s = Schedule::wsd(0.1, 0.9, 1000, 0.1).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: Schedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        let bad = r#"{"kind":"poly_decay","base_lr":0.1,"gamma":1.5}"#;
        let err = serde_json::from_str::<Schedule>(bad).unwrap_err().to_string();
        assert!(err.contains("gamma") && err.contains("(0, 1)"), "{err}");
        let typo = r#"{"kind":"constant","base_lr":0.1,"gama":0.5}"#;
        assert!(serde_json::from_str::<Schedule>(typo).is_err());
    }

    fn any_schedule() -> impl Strategy<Value = Schedule> {
        let lr = 0.001f64..2.0;
        prop_oneof![
            lr.clone().prop_map(|e| Schedule::constant(e).unwrap()),
            (lr.clone(), 0.01f64..0.99).prop_map(|(e, g)| Schedule::poly_decay(e, g).unwrap()),
            (lr.clone(), 1.0f64..1e5).prop_map(|(e, a)| Schedule::sqrt_alpha(e, a).unwrap()),
            (lr.clone(), 2u64..500, 0.0f64..0.5, 0.0f64..=1.0).prop_map(|(e, h, w, f)| {
                Schedule::new(
                    ScheduleKind::Cosine {
                        horizon: h,
                        warmup_frac: w,
                        floor_frac: f,
                    },
                    e,
                )
                .unwrap()
            }),
            (lr.clone(), 0.05f64..0.95, 2u64..500, 0.0f64..=1.0)
                .prop_map(|(e, r, h, f)| Schedule::wsd(e, r, h, f).unwrap()),
            (lr, 1u64..500, 0.0f64..=1.0)
                .prop_map(|(e, h, f)| Schedule::linear_decay(e, h, f).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn nonnegative_and_monotone_after_warmup(s in any_schedule()) {
            let end = s.horizon().unwrap_or(500);
            let start = match &s.kind {
                ScheduleKind::Cosine { horizon, warmup_frac, .. } => {
                    (warmup_frac * *horizon as f64).ceil() as u64 + 1
                }
                _ => 1,
            };
            let mut prev = f64::INFINITY;
            for t in 1..=end {
                let lr = s.lr_at(t).unwrap();
                prop_assert!(lr >= 0.0);
                if t >= start {
                    prop_assert!(lr <= prev * (1.0 + 1e-12) + 1e-15, "t={} lr={} prev={}", t, lr, prev);
                    prev = lr;
                }
            }
        }
    }
}
