//! Exact excess-risk dynamics of SGD on high-dimensional linear regression
//! with power-law spectra, and the tools to compare horizon-free schedules
//! with iterate averaging against horizon-tuned cosine and WSD schedules.
//!
//! Eigenvalues follow `λ_i ∝ i^{-a}` and the target's energy in
//! direction `i` follows `λ_i w*_i² ∝ i^{-b}`. Because the Hessian is
//! diagonal, the per-direction second moments evolve by a closed
//! recursion ([`recursion`]), so every risk here is exact and
//! deterministic. [`empirical`] provides the matching Monte Carlo SGD.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod empirical;
pub mod envelope;
pub mod error;
pub mod numeric;
pub mod problem;
pub mod recursion;
pub mod schedule;
pub mod svg;
pub mod theory;

pub use averaging::{AveragingConfig, UpdateOrder};
pub use empirical::{monte_carlo_risk, MonteCarloOptions, MonteCarloTable, Start};
pub use envelope::{
    anytime_hyperparameter_selection, build_cosine_envelope, compare_schedules, evaluate_anytime,
    wsd_branches, ComparisonGrid, CosineShape, EnvelopePoint, SelectionRule,
};
pub use error::{Error, Result};
pub use problem::{build_spectrum, max_stable_lr, ProblemSpec, Spectrum};
pub use recursion::{
    excess_risk, run_trajectory, stability_threshold, step_moments, MomentSimulator, MomentState,
    RiskTrace, TraceRow,
};
pub use schedule::{Schedule, ScheduleKind};
pub use theory::{gamma_star, predicted_rate, Regime};
