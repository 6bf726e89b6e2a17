//! Exact second-moment recursion of single-sample SGD on Gaussian data.
//!
//! In the eigenbasis the diagonal `m_k = E[(w_t - w*)²_k]` evolves in closed
//! form:
//!
//! ```text
//! r     = Σ_j λ_j m_j
//! m'_k  = (1 - 2ηλ_k + 2η²λ_k²) m_k + η² λ_k r + η² σ² λ_k
//! ```
//!
//! The off-diagonal entries never feed back into the diagonal, so this is the
//! full risk dynamics, not a bound.

use std::io::Write;

use crate::averaging::{
    ema_after_step, ema_before_step, ema_retention, AveragingConfig, UpdateOrder,
    WindowAccumulator,
};
use crate::error::{Error, Result};
use crate::numeric::{dot, pairwise_sum, CHUNK};
use crate::problem::{build_spectrum, ProblemSpec, Spectrum};
use crate::schedule::Schedule;

/// Iterate second moments after `t` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub t: u64,
    pub m: Vec<f64>,
    /// Cached `Σ λ_k m_k`.
    pub weighted_sum: f64,
}

impl MomentState {
    /// State at `w₀ = 0`.
    pub fn initial(spectrum: &Spectrum) -> Self {
        Self::from_moments(spectrum, spectrum.initial_moments.clone())
    }

    pub fn from_moments(spectrum: &Spectrum, m: Vec<f64>) -> Self {
        let weighted_sum = dot(&spectrum.eigenvalues, &m);
        Self {
            t: 0,
            m,
            weighted_sum,
        }
    }
}

/// One SGD step of the moment recursion with learning rate `lr`.
pub fn step_moments(
    state: &MomentState,
    spectrum: &Spectrum,
    lr: f64,
    noise_var: f64,
) -> Result<MomentState> {
    if state.m.len() != spectrum.dimension() {
        return Err(Error::InvalidInput(format!(
            "state has {} coordinates, spectrum {}",
            state.m.len(),
            spectrum.dimension()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::param("lr", lr, "must be >= 0"));
    }
    let mut next = state.clone();
    let mut partials = Vec::new();
    next.weighted_sum = update_in_place(
        &mut next.m,
        &spectrum.eigenvalues,
        lr,
        noise_var,
        state.weighted_sum,
        &mut partials,
    );
    next.t += 1;
    check_finite(next.weighted_sum, next.t, lr)?;
    Ok(next)
}

/// Excess risk `½ Σ λ_k m_k` (the `σ²/2` floor is never included).
pub fn excess_risk(state: &MomentState, spectrum: &Spectrum) -> f64 {
    0.5 * dot(&spectrum.eigenvalues, &state.m)
}

fn check_finite(weighted_sum: f64, t: u64, lr: f64) -> Result<()> {
    if weighted_sum.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: t,
            lr,
            detail: "non-finite moments; the learning rate exceeds the stability limit".into(),
        })
    }
}

/// Updates `m` in place and returns the new `Σ λ m` using the fixed
/// chunk/pairwise reduction order.
fn update_in_place(
    m: &mut [f64],
    eigenvalues: &[f64],
    lr: f64,
    noise_var: f64,
    weighted_sum: f64,
    partials: &mut Vec<f64>,
) -> f64 {
    partials.clear();
    let lr2 = lr * lr;
    let inject = lr2 * (weighted_sum + noise_var);
    for (mc, lc) in m.chunks_mut(CHUNK).zip(eigenvalues.chunks(CHUNK)) {
        let mut part = 0.0;
        for (mk, &lam) in mc.iter_mut().zip(lc) {
            let contraction = 1.0 - 2.0 * lr * lam + 2.0 * lr2 * lam * lam;
            let next = contraction * *mk + inject * lam;
            *mk = next;
            part += lam * next;
        }
        partials.push(part);
    }
    pairwise_sum(partials)
}

#[derive(Debug, Clone)]
enum Tracker {
    Last,
    Ema {
        f: f64,
        order: UpdateOrder,
        v: Vec<f64>,
        c: Vec<f64>,
    },
    Tail(AveragingConfig),
}

#[derive(Debug, Clone)]
struct Window {
    acc: WindowAccumulator,
    needed_until: u64,
}

/// Steps the moment recursion together with a set of averaging rules.
///
/// Cloning a simulator snapshots the full state, which is how decay branches
/// share a common trunk.
#[derive(Debug, Clone)]
pub struct MomentSimulator<'a> {
    spectrum: &'a Spectrum,
    noise_var: f64,
    schedule: Schedule,
    state: MomentState,
    configs: Vec<AveragingConfig>,
    trackers: Vec<Tracker>,
    /// Window starts not yet reached, with the last step they are read at.
    pending: Vec<(u64, u64)>,
    windows: Vec<Window>,
    partials: Vec<f64>,
    steps_taken: u64,
}

impl<'a> MomentSimulator<'a> {
    /// Starts from the spectrum's initial moments. `read_steps` lists every
    /// step at which tail-averaged risks will be read.
    pub fn new(
        spectrum: &'a Spectrum,
        noise_var: f64,
        schedule: Schedule,
        averaging: &[AveragingConfig],
        read_steps: &[u64],
    ) -> Result<Self> {
        Self::from_state(
            spectrum,
            noise_var,
            schedule,
            averaging,
            read_steps,
            MomentState::initial(spectrum),
        )
    }

    pub fn from_state(
        spectrum: &'a Spectrum,
        noise_var: f64,
        schedule: Schedule,
        averaging: &[AveragingConfig],
        read_steps: &[u64],
        state: MomentState,
    ) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::param("noise_var", noise_var, "must be >= 0"));
        }
        schedule.validate()?;
        let mut trackers = Vec::with_capacity(averaging.len());
        let mut pending: Vec<(u64, u64)> = Vec::new();
        for cfg in averaging {
            cfg.validate()?;
            let tracker = match *cfg {
                AveragingConfig::None => Tracker::Last,
                AveragingConfig::Ema { f: 0.0, .. } => Tracker::Last,
                AveragingConfig::Ema { f, update_order } => Tracker::Ema {
                    f,
                    order: update_order,
                    v: state.m.clone(),
                    c: state.m.clone(),
                },
                tail => {
                    for &t in read_steps {
                        let start = tail.window_start(t).unwrap_or(0);
                        if t >= 1 && start >= 1 && start <= t && start > state.t {
                            match pending.iter_mut().find(|(s, _)| *s == start) {
                                Some(entry) => entry.1 = entry.1.max(t),
                                None => pending.push((start, t)),
                            }
                        }
                    }
                    Tracker::Tail(tail)
                }
            };
            trackers.push(tracker);
        }
        pending.sort_unstable();
        Ok(Self {
            spectrum,
            noise_var,
            schedule,
            state,
            configs: averaging.to_vec(),
            trackers,
            pending,
            windows: Vec::new(),
            partials: Vec::with_capacity(spectrum.dimension().div_ceil(CHUNK)),
            steps_taken: 0,
        })
    }

    pub fn t(&self) -> u64 {
        self.state.t
    }

    pub fn state(&self) -> &MomentState {
        &self.state
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn configs(&self) -> &[AveragingConfig] {
        &self.configs
    }

    /// Number of SGD steps this simulator (and the trunk it was cloned from)
    /// has executed.
    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Replaces the schedule for all future steps. Used to branch a decay
    /// phase off a shared trunk.
    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.schedule = schedule;
    }

    /// Advances one step and returns the learning rate used.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.state.t + 1;
        let lr = self.schedule.lr_at(t)?;
        let lam = &self.spectrum.eigenvalues;

        for tracker in &mut self.trackers {
            if let Tracker::Ema {
                f,
                order: UpdateOrder::BeforeStep,
                v,
                c,
            } = tracker
            {
                let rho = ema_retention(*f, t)?;
                ema_before_step(v, c, &self.state.m, lam, lr, rho);
            }
        }

        let ws = update_in_place(
            &mut self.state.m,
            lam,
            lr,
            self.noise_var,
            self.state.weighted_sum,
            &mut self.partials,
        );
        self.state.weighted_sum = ws;
        self.state.t = t;
        self.steps_taken += 1;
        check_finite(ws, t, lr)?;

        for tracker in &mut self.trackers {
            if let Tracker::Ema {
                f,
                order: UpdateOrder::AfterStep,
                v,
                c,
            } = tracker
            {
                let rho = ema_retention(*f, t)?;
                ema_after_step(v, c, &self.state.m, lam, lr, rho);
            }
        }

        while let Some(&(start, until)) = self.pending.first() {
            if start != t {
                break;
            }
            self.pending.remove(0);
            self.windows.push(Window {
                acc: WindowAccumulator::new(start, lam.len()),
                needed_until: until,
            });
        }
        self.windows.retain(|w| w.needed_until >= t);
        for w in &mut self.windows {
            w.acc.absorb(t, &self.state.m, lam, lr);
        }
        Ok(lr)
    }

    /// Advances until `t == target`.
    pub fn advance_to(&mut self, target: u64) -> Result<()> {
        while self.state.t < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn last_risk(&self) -> f64 {
        0.5 * self.state.weighted_sum
    }

    /// Excess risk of the `i`-th averaging rule at the current step.
    pub fn averaged_risk(&self, i: usize) -> Result<f64> {
        let t = self.state.t;
        match &self.trackers[i] {
            Tracker::Last => Ok(self.last_risk()),
            Tracker::Ema { v, .. } => Ok(0.5 * dot(&self.spectrum.eigenvalues, v)),
            Tracker::Tail(cfg) => {
                let start = cfg.window_start(t).unwrap_or(0);
                if t == 0 || start > t {
                    // Window not started yet: the average is the current iterate.
                    return Ok(self.last_risk());
                }
                self.windows
                    .iter()
                    .find(|w| w.acc.start() == start)
                    .map(|w| w.acc.risk())
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "window [{start}, {t}] for {} was not registered as a read step",
                            cfg.label()
                        ))
                    })
            }
        }
    }

    /// Risks of all averaging rules at the current step.
    pub fn averaged_risks(&self) -> Result<Vec<f64>> {
        (0..self.trackers.len()).map(|i| self.averaged_risk(i)).collect()
    }
}

/// One recorded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    /// Learning rate of the step that produced this iterate (0 at step 0).
    pub lr: f64,
    pub excess_last: f64,
    pub excess_avg: Vec<f64>,
}

/// Excess-risk time series for one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTrace {
    pub schedule: Schedule,
    pub averaging: Vec<AveragingConfig>,
    pub rows: Vec<TraceRow>,
    pub steps_taken: u64,
}

impl RiskTrace {
    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["step".to_string(), "lr".into(), "excess_last".into()];
        cols.extend(self.averaging.iter().map(|a| format!("excess_{}", a.label())));
        cols
    }

    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("trace always holds the step-0 row")
    }

    pub fn row_at(&self, step: u64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.step == step)
    }

    /// CSV with 17 significant digits, `.` decimals and LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.column_names().join(","))?;
        for row in &self.rows {
            write!(out, "{},{:.16e},{:.16e}", row.step, row.lr, row.excess_last)?;
            for v in &row.excess_avg {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Checks a checkpoint list and returns it deduplicated with step 0 first.
pub(crate) fn normalize_checkpoints(n: u64, checkpoints: &[u64]) -> Result<Vec<u64>> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("checkpoints must be sorted".into()));
    }
    if let Some(&last) = checkpoints.last() {
        if last > n {
            return Err(Error::InvalidInput(format!(
                "checkpoint {last} beyond the run length {n}"
            )));
        }
    }
    let mut steps = vec![0];
    if checkpoints.is_empty() {
        steps.push(n);
    } else {
        steps.extend_from_slice(checkpoints);
    }
    steps.dedup();
    Ok(steps)
}

/// Runs the recursion for `n` steps, recording every checkpoint.
pub fn run_trajectory(
    spec: &ProblemSpec,
    schedule: &Schedule,
    n: u64,
    averaging: &[AveragingConfig],
    checkpoints: &[u64],
) -> Result<RiskTrace> {
    let spectrum = build_spectrum(spec)?;
    run_trajectory_on(&spectrum, spec.noise_var, schedule, n, averaging, checkpoints)
}

/// [`run_trajectory`] on an explicit spectrum.
pub fn run_trajectory_on(
    spectrum: &Spectrum,
    noise_var: f64,
    schedule: &Schedule,
    n: u64,
    averaging: &[AveragingConfig],
    checkpoints: &[u64],
) -> Result<RiskTrace> {
    if let Some(h) = schedule.horizon() {
        if n > h {
            return Err(Error::InvalidInput(format!(
                "run length {n} exceeds the horizon {h} of {}",
                schedule.label()
            )));
        }
    }
    let steps = normalize_checkpoints(n, checkpoints)?;
    let mut sim = MomentSimulator::new(spectrum, noise_var, schedule.clone(), averaging, &steps)?;
    let mut rows = Vec::with_capacity(steps.len());
    let mut lr = 0.0;
    for &target in &steps {
        while sim.t() < target {
            lr = sim.step()?;
        }
        rows.push(TraceRow {
            step: target,
            lr,
            excess_last: sim.last_risk(),
            excess_avg: sim.averaged_risks()?,
        });
    }
    Ok(RiskTrace {
        schedule: schedule.clone(),
        averaging: averaging.to_vec(),
        rows,
        steps_taken: sim.steps_taken(),
    })
}

const PROBE_STEPS: u64 = 500;
const BISECTION_ITERS: usize = 12;

/// Largest base learning rate for which a short noise-free probe run from
/// the problem's initial moments never increases the risk.
///
/// Bisects over `[0, 4 / Tr(H)]`; returns 0 if every probe fails.
pub fn stability_threshold(spec: &ProblemSpec, schedule: &Schedule) -> Result<f64> {
    let spectrum = build_spectrum(spec)?;
    stability_threshold_on(&spectrum, schedule)
}

pub fn stability_threshold_on(spectrum: &Spectrum, schedule: &Schedule) -> Result<f64> {
    let probe_len = schedule.horizon().map_or(PROBE_STEPS, |h| h.min(PROBE_STEPS));
    let stable = |lr: f64| -> Result<bool> {
        if lr == 0.0 {
            return Ok(true);
        }
        let sched = schedule.with_base_lr(lr)?;
        let mut sim = MomentSimulator::new(spectrum, 0.0, sched, &[], &[])?;
        let mut prev = sim.last_risk();
        for _ in 0..probe_len {
            match sim.step() {
                Ok(_) => {}
                Err(e) if e.is_divergence() => return Ok(false),
                Err(e) => return Err(e),
            }
            let r = sim.last_risk();
            if r > prev * (1.0 + 1e-12) {
                return Ok(false);
            }
            prev = r;
        }
        Ok(true)
    };
    let mut lo = 0.0;
    let mut hi = 4.0 / spectrum.trace;
    if stable(hi)? {
        return Ok(hi);
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if stable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
