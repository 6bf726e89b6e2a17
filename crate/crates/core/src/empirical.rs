//! Monte Carlo SGD on sampled Gaussian data.
//!
//! Sampling happens in the eigenbasis: `x_k = √λ_k g_k` with standard normal
//! `g`, `y = ⟨x, w*⟩ + ε`, `ε ~ N(0, σ²)`. Each seed drives a ChaCha8 stream
//! (`seed_from_u64(base_seed)` with stream id = seed index), so trajectories
//! are reproducible across platforms and streams never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::averaging::{ema_retention, AveragingConfig, UpdateOrder};
use crate::error::{Error, Result};
use crate::problem::{build_spectrum, ProblemSpec, Spectrum};
use crate::recursion::normalize_checkpoints;
use crate::schedule::Schedule;

/// Where the iterate starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Start {
    /// `w₀ = 0`: full bias.
    #[default]
    Origin,
    /// `w₀ = w*`: variance only.
    Optimum,
}

#[derive(Debug, Clone)]
enum Averager {
    Last,
    Ema { f: f64, order: UpdateOrder, avg: Vec<f64> },
    Tail(AveragingConfig),
}

#[derive(Debug, Clone)]
struct WindowSum {
    start: u64,
    needed_until: u64,
    sum: Vec<f64>,
}

/// A single SGD trajectory with its averaged iterates.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub seed: u64,
    pub batch_size: usize,
    pub t: u64,
    pub w: Vec<f64>,
    target: Vec<f64>,
    rng: ChaCha8Rng,
    averagers: Vec<Averager>,
    pending: Vec<(u64, u64)>,
    windows: Vec<WindowSum>,
    grad: Vec<f64>,
    x: Vec<f64>,
}

impl SgdRun {
    pub fn new(
        spectrum: &Spectrum,
        base_seed: u64,
        stream: u64,
        batch_size: usize,
        start: Start,
        averaging: &[AveragingConfig],
        read_steps: &[u64],
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch_size", 0, "must be at least 1"));
        }
        let target: Vec<f64> = spectrum.initial_moments.iter().map(|m| m.sqrt()).collect();
        let w = match start {
            Start::Origin => vec![0.0; target.len()],
            Start::Optimum => target.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream);
        let mut averagers = Vec::with_capacity(averaging.len());
        let mut pending: Vec<(u64, u64)> = Vec::new();
        for cfg in averaging {
            cfg.validate()?;
            averagers.push(match *cfg {
                AveragingConfig::None => Averager::Last,
                AveragingConfig::Ema { f: 0.0, .. } => Averager::Last,
                AveragingConfig::Ema { f, update_order } => Averager::Ema {
                    f,
                    order: update_order,
                    avg: w.clone(),
                },
                tail => {
                    for &t in read_steps {
                        let s = tail.window_start(t).unwrap_or(0);
                        if t >= 1 && s >= 1 && s <= t {
                            match pending.iter_mut().find(|(p, _)| *p == s) {
                                Some(e) => e.1 = e.1.max(t),
                                None => pending.push((s, t)),
                            }
                        }
                    }
                    Averager::Tail(tail)
                }
            });
        }
        pending.sort_unstable();
        let d = target.len();
        Ok(Self {
            seed: stream,
            batch_size,
            t: 0,
            w,
            target,
            rng,
            averagers,
            pending,
            windows: Vec::new(),
            grad: vec![0.0; d],
            x: vec![0.0; d],
        })
    }

    /// Takes one minibatch step with learning rate `lr`.
    pub fn step(&mut self, spectrum: &Spectrum, lr: f64, noise_var: f64) -> Result<()> {
        let t = self.t + 1;
        for a in &mut self.averagers {
            if let Averager::Ema {
                f,
                order: UpdateOrder::BeforeStep,
                avg,
            } = a
            {
                let rho = ema_retention(*f, t)?;
                blend(avg, &self.w, rho);
            }
        }

        let sigma = noise_var.sqrt();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..self.batch_size {
            for (xk, lam) in self.x.iter_mut().zip(&spectrum.eigenvalues) {
                let g: f64 = self.rng.sample(StandardNormal);
                *xk = lam.sqrt() * g;
            }
            let eps: f64 = self.rng.sample::<f64, _>(StandardNormal) * sigma;
            let residual = residual(&self.x, &self.w, &self.target, eps);
            for (gk, xk) in self.grad.iter_mut().zip(&self.x) {
                *gk += xk * residual;
            }
        }
        let scale = lr / self.batch_size as f64;
        for (wk, gk) in self.w.iter_mut().zip(&self.grad) {
            *wk -= scale * gk;
        }
        self.t = t;

        for a in &mut self.averagers {
            if let Averager::Ema {
                f,
                order: UpdateOrder::AfterStep,
                avg,
            } = a
            {
                let rho = ema_retention(*f, t)?;
                blend(avg, &self.w, rho);
            }
        }
        while let Some(&(start, until)) = self.pending.first() {
            if start != t {
                break;
            }
            self.pending.remove(0);
            self.windows.push(WindowSum {
                start,
                needed_until: until,
                sum: vec![0.0; self.w.len()],
            });
        }
        self.windows.retain(|w| w.needed_until >= t);
        for win in &mut self.windows {
            for (s, wk) in win.sum.iter_mut().zip(&self.w) {
                *s += wk;
            }
        }
        Ok(())
    }

    fn risk_of(&self, spectrum: &Spectrum, w: &[f64]) -> f64 {
        0.5 * w
            .iter()
            .zip(&self.target)
            .zip(&spectrum.eigenvalues)
            .map(|((wk, tk), lam)| lam * (wk - tk) * (wk - tk))
            .sum::<f64>()
    }

    /// Closed-form excess risk `½ Σ λ_k (w_k - w*_k)²` of the last iterate.
    pub fn last_risk(&self, spectrum: &Spectrum) -> f64 {
        self.risk_of(spectrum, &self.w)
    }

    pub fn averaged_risk(&self, spectrum: &Spectrum, i: usize) -> Result<f64> {
        match &self.averagers[i] {
            Averager::Last => Ok(self.last_risk(spectrum)),
            Averager::Ema { avg, .. } => Ok(self.risk_of(spectrum, avg)),
            Averager::Tail(cfg) => {
                let t = self.t;
                let start = cfg.window_start(t).unwrap_or(0);
                if t == 0 || start > t {
                    return Ok(self.last_risk(spectrum));
                }
                let win = self
                    .windows
                    .iter()
                    .find(|w| w.start == start)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("window starting at {start} was not registered"))
                    })?;
                let n = (t - start + 1) as f64;
                let mean: Vec<f64> = win.sum.iter().map(|s| s / n).collect();
                Ok(self.risk_of(spectrum, &mean))
            }
        }
    }
}

fn blend(avg: &mut [f64], w: &[f64], rho: f64) {
    for (a, wk) in avg.iter_mut().zip(w) {
        *a = rho * *a + (1.0 - rho) * wk;
    }
}

fn residual(x: &[f64], w: &[f64], target: &[f64], eps: f64) -> f64 {
    x.iter()
        .zip(w.iter().zip(target))
        .map(|(xk, (wk, tk))| xk * (wk - tk))
        .sum::<f64>()
        - eps
}

/// Single-sample SGD update `w - η x (xᵀw - y)` with `y = xᵀw* + ε`, for
/// caller-supplied draws.
pub fn sgd_step_with_sample(w: &[f64], target: &[f64], x: &[f64], eps: f64, lr: f64) -> Vec<f64> {
    let r = residual(x, w, target, eps);
    w.iter().zip(x).map(|(wk, xk)| wk - lr * xk * r).collect()
}

/// Mean and standard error at one checkpoint for one averaging column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRow {
    pub step: u64,
    pub last: Estimate,
    pub averaged: Vec<Estimate>,
}

/// Seed-averaged excess risks.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloTable {
    pub averaging: Vec<AveragingConfig>,
    pub seed_count: usize,
    pub rows: Vec<MonteCarloRow>,
    /// Streams whose risk exceeded `10⁶ ×` the initial risk.
    pub divergent_seeds: Vec<u64>,
}

impl MonteCarloTable {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "step,seed_count,excess_last,stderr_last")?;
        for a in &self.averaging {
            write!(out, ",excess_{0},stderr_{0}", a.label())?;
        }
        writeln!(out)?;
        for row in &self.rows {
            write!(
                out,
                "{},{},{:.16e},{:.16e}",
                row.step, self.seed_count, row.last.mean, row.last.stderr
            )?;
            for e in &row.averaged {
                write!(out, ",{:.16e},{:.16e}", e.mean, e.stderr)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Options for [`monte_carlo_risk`].
#[derive(Debug, Clone)]
pub struct MonteCarloOptions {
    pub batch_size: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub start: Start,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            batch_size: 1,
            seeds: 200,
            base_seed: 0x5eed,
            start: Start::Origin,
        }
    }
}

/// Runs `seeds` independent SGD trajectories and aggregates the excess risk
/// at each checkpoint. Seeds run in parallel; aggregation is in seed order.
pub fn monte_carlo_risk(
    spec: &ProblemSpec,
    schedule: &Schedule,
    n: u64,
    averaging: &[AveragingConfig],
    checkpoints: &[u64],
    opts: &MonteCarloOptions,
) -> Result<MonteCarloTable> {
    let spectrum = build_spectrum(spec)?;
    monte_carlo_risk_on(&spectrum, spec.noise_var, schedule, n, averaging, checkpoints, opts)
}

pub fn monte_carlo_risk_on(
    spectrum: &Spectrum,
    noise_var: f64,
    schedule: &Schedule,
    n: u64,
    averaging: &[AveragingConfig],
    checkpoints: &[u64],
    opts: &MonteCarloOptions,
) -> Result<MonteCarloTable> {
    if opts.seeds < 2 {
        return Err(Error::param("seeds", opts.seeds, "need at least 2 seeds"));
    }
    if let Some(h) = schedule.horizon() {
        if n > h {
            return Err(Error::InvalidInput(format!(
                "run length {n} exceeds the horizon {h} of {}",
                schedule.label()
            )));
        }
    }
    let steps = normalize_checkpoints(n, checkpoints)?;
    let lrs: Vec<f64> = (1..=n).map(|t| schedule.lr_at(t)).collect::<Result<_>>()?;
    let width = averaging.len() + 1;

    // per seed: risks[checkpoint][column], diverged flag
    let per_seed: Vec<(Vec<Vec<f64>>, bool)> = (0..opts.seeds as u64)
        .into_par_iter()
        .map(|stream| -> Result<(Vec<Vec<f64>>, bool)> {
            let mut run = SgdRun::new(
                spectrum,
                opts.base_seed,
                stream,
                opts.batch_size,
                opts.start,
                averaging,
                &steps,
            )?;
            let initial = run.last_risk(spectrum);
            let limit = 1e6 * initial.max(f64::MIN_POSITIVE);
            let mut diverged = false;
            let mut out = Vec::with_capacity(steps.len());
            for &target in &steps {
                while run.t < target {
                    run.step(spectrum, lrs[run.t as usize], noise_var)?;
                }
                let mut row = Vec::with_capacity(width);
                row.push(run.last_risk(spectrum));
                for i in 0..averaging.len() {
                    row.push(run.averaged_risk(spectrum, i)?);
                }
                if row.iter().any(|r| !r.is_finite() || (initial > 0.0 && *r > limit)) {
                    diverged = true;
                }
                out.push(row);
            }
            Ok((out, diverged))
        })
        .collect::<Result<_>>()?;

    let k = opts.seeds as f64;
    let rows = steps
        .iter()
        .enumerate()
        .map(|(ci, &step)| {
            let mut cols = (0..width).map(|col| {
                let vals: Vec<f64> = per_seed.iter().map(|(r, _)| r[ci][col]).collect();
                let mean = vals.iter().sum::<f64>() / k;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
                Estimate {
                    mean,
                    stderr: (var / k).sqrt(),
                }
            });
            let last = cols.next().expect("width >= 1");
            MonteCarloRow {
                step,
                last,
                averaged: cols.collect(),
            }
        })
        .collect();
    let divergent_seeds = per_seed
        .iter()
        .enumerate()
        .filter(|(_, (_, d))| *d)
        .map(|(i, _)| i as u64)
        .collect();
    Ok(MonteCarloTable {
        averaging: averaging.to_vec(),
        seed_count: opts.seeds,
        rows,
        divergent_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ProblemSpec {
        ProblemSpec::new(8, 1.5, 3.0, 0.05)
    }

    #[test]
    fn forced_draw_hand_arithmetic() {
        let w = sgd_step_with_sample(&[0.0], &[1.0], &[1.0], 0.0, 0.1);
        assert!((w[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fixed_points() {
        let s = build_spectrum(&spec()).unwrap();
        // Zero noise at the optimum: nothing moves.
        let mut run = SgdRun::new(&s, 1, 0, 1, Start::Optimum, &[], &[]).unwrap();
        let before = run.w.clone();
        for _ in 0..20 {
            run.step(&s, 0.3, 0.0).unwrap();
        }
        assert_eq!(run.w, before);
        // Zero learning rate: nothing moves either.
        let mut run = SgdRun::new(&s, 1, 0, 1, Start::Origin, &[], &[]).unwrap();
        for _ in 0..20 {
            run.step(&s, 0.0, 1.0).unwrap();
        }
        assert!(run.w.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_step_table_is_exact() {
        let s = spec();
        let spectrum = build_spectrum(&s).unwrap();
        let opts = MonteCarloOptions {
            seeds: 2,
            ..Default::default()
        };
        let cfg = [AveragingConfig::ema(6.25)];
        let t = monte_carlo_risk(&s, &Schedule::constant(0.1).unwrap(), 0, &cfg, &[], &opts).unwrap();
        assert_eq!(t.rows.len(), 1);
        let bias = 0.5 * spectrum.signal.iter().sum::<f64>();
        assert!((t.rows[0].last.mean - bias).abs() < 1e-14);
        assert_eq!(t.rows[0].last.stderr, 0.0);
        assert_eq!(t.rows[0].averaged[0].stderr, 0.0);
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let s = spec();
        let sched = Schedule::constant(0.2).unwrap();
        let cfg = [AveragingConfig::tail(1.0), AveragingConfig::ema(12.5)];
        let opts = MonteCarloOptions {
            seeds: 4,
            batch_size: 2,
            ..Default::default()
        };
        let a = monte_carlo_risk(&s, &sched, 50, &cfg, &[25, 50], &opts).unwrap();
        let b = monte_carlo_risk(&s, &sched, 50, &cfg, &[25, 50], &opts).unwrap();
        assert_eq!(a, b);
        let spectrum = build_spectrum(&s).unwrap();
        let mut r0 = SgdRun::new(&spectrum, 7, 0, 1, Start::Origin, &[], &[]).unwrap();
        let mut r1 = SgdRun::new(&spectrum, 7, 1, 1, Start::Origin, &[], &[]).unwrap();
        r0.step(&spectrum, 0.1, 0.1).unwrap();
        r1.step(&spectrum, 0.1, 0.1).unwrap();
        assert_ne!(r0.w, r1.w);
    }

    #[test]
    fn divergent_seeds_are_reported() {
        let s = spec();
        let opts = MonteCarloOptions {
            seeds: 3,
            ..Default::default()
        };
        let t = monte_carlo_risk(&s, &Schedule::constant(5.0).unwrap(), 200, &[], &[200], &opts).unwrap();
        assert_eq!(t.divergent_seeds, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_single_seed() {
        let opts = MonteCarloOptions {
            seeds: 1,
            ..Default::default()
        };
        assert!(monte_carlo_risk(&spec(), &Schedule::constant(0.1).unwrap(), 5, &[], &[], &opts).is_err());
    }
}
