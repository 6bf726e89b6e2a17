//! Power-law regression instances.
//!
//! The problem is stated directly in the eigenbasis of the data covariance:
//! `λ_i = c_λ · i^{-a}` and the per-direction signal `λ_i (w*_i)² = c_w · i^{-b}`.
//! The target is deterministic; its squared coordinates are set to their
//! expected profile.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, CompensatedSum};

/// A diagonal linear-regression instance with power-law spectrum and signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// Number of retained eigendirections.
    pub dimension: usize,
    /// Capacity exponent `a` (eigenvalue decay).
    pub capacity: f64,
    /// Source exponent `b` (signal decay).
    pub source: f64,
    /// Label noise variance `σ²`.
    pub noise_var: f64,
    #[serde(default = "one")]
    pub lambda_scale: f64,
    #[serde(default = "one")]
    pub signal_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ProblemSpec {
    /// Instance with unit scale constants.
    pub fn new(dimension: usize, capacity: f64, source: f64, noise_var: f64) -> Self {
        Self {
            dimension,
            capacity,
            source,
            noise_var,
            lambda_scale: 1.0,
            signal_scale: 1.0,
        }
    }

    pub fn with_dimension(&self, dimension: usize) -> Self {
        Self {
            dimension,
            ..self.clone()
        }
    }

    pub fn with_noise(&self, noise_var: f64) -> Self {
        Self {
            noise_var,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::param("dimension", 0, "must be at least 1"));
        }
        if !(self.capacity > 1.0) || !self.capacity.is_finite() {
            return Err(Error::param("capacity", self.capacity, "must be finite and > 1"));
        }
        if !(self.source > 1.0) || !self.source.is_finite() {
            return Err(Error::param("source", self.source, "must be finite and > 1"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::param("noise_var", self.noise_var, "must be finite and >= 0"));
        }
        if !(self.lambda_scale > 0.0) || !self.lambda_scale.is_finite() {
            return Err(Error::param("lambda_scale", self.lambda_scale, "must be finite and > 0"));
        }
        if !(self.signal_scale > 0.0) || !self.signal_scale.is_finite() {
            return Err(Error::param("signal_scale", self.signal_scale, "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Eigenvalues, signal profile and initial moments of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Eigenvalues, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// `s_i = λ_i (w*_i)²`.
    pub signal: Vec<f64>,
    /// `(w*_i)² = s_i / λ_i`, the initial second moment when `w₀ = 0`.
    pub initial_moments: Vec<f64>,
    /// `Tr(H) = Σ λ_i`.
    pub trace: f64,
}

impl Spectrum {
    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Builds a spectrum from explicit eigenvalues and target moments. Used
    /// for hand-constructed instances in tests and tooling.
    pub fn from_parts(eigenvalues: Vec<f64>, initial_moments: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidInput("empty spectrum".into()));
        }
        if eigenvalues.len() != initial_moments.len() {
            return Err(Error::InvalidInput(format!(
                "{} eigenvalues but {} moments",
                eigenvalues.len(),
                initial_moments.len()
            )));
        }
        if eigenvalues.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput("eigenvalues must be finite and positive".into()));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("eigenvalues must be nonincreasing".into()));
        }
        if initial_moments.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput("moments must be finite and nonnegative".into()));
        }
        let signal = eigenvalues.iter().zip(&initial_moments).map(|(l, m)| l * m).collect();
        let trace = pairwise_sum(&eigenvalues);
        Ok(Self {
            eigenvalues,
            signal,
            initial_moments,
            trace,
        })
    }

    /// Tail signal mass `Σ_{i>k} s_i` (1-indexed `k`; `k = 0` is the full norm).
    pub fn tail_signal(&self, k: usize) -> f64 {
        let k = k.min(self.signal.len());
        self.signal[k..].iter().rev().copied().collect::<CompensatedSum>().value()
    }

    /// Head signal mass `Σ_{i≤k} s_i`.
    pub fn head_signal(&self, k: usize) -> f64 {
        let k = k.min(self.signal.len());
        self.signal[..k].iter().copied().collect::<CompensatedSum>().value()
    }

    /// Writes `index,lambda,signal,m0` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,lambda,signal,m0")?;
        for i in 0..self.dimension() {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e}",
                i + 1,
                self.eigenvalues[i],
                self.signal[i],
                self.initial_moments[i]
            )?;
        }
        Ok(())
    }
}

/// `λ_i = c_λ i^{-a}`, `s_i = c_w i^{-b}`, `m₀,ᵢ = s_i / λ_i`.
pub fn build_spectrum(spec: &ProblemSpec) -> Result<Spectrum> {
    spec.validate()?;
    let d = spec.dimension;
    let mut eigenvalues = Vec::with_capacity(d);
    let mut signal = Vec::with_capacity(d);
    let mut initial_moments = Vec::with_capacity(d);
    let ratio = spec.signal_scale / spec.lambda_scale;
    for i in 1..=d {
        let x = i as f64;
        eigenvalues.push(spec.lambda_scale * x.powf(-spec.capacity));
        signal.push(spec.signal_scale * x.powf(-spec.source));
        initial_moments.push(ratio * x.powf(spec.capacity - spec.source));
    }
    let trace = pairwise_sum(&eigenvalues);
    Ok(Spectrum {
        eigenvalues,
        signal,
        initial_moments,
        trace,
    })
}

/// `1 / Tr(H)`, the reference learning-rate scale.
pub fn max_stable_lr(spec: &ProblemSpec) -> Result<f64> {
    Ok(1.0 / build_spectrum(spec)?.trace)
}
