//! Per-horizon cosine envelope, single-run anytime evaluation, WSD decay
//! branches and anytime hyperparameter selection.
//!
//! Every risk reported here is the exact excess risk from the moment
//! recursion; there is no held-out sampling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::AveragingConfig;
use crate::error::{Error, Result};
use crate::problem::{build_spectrum, ProblemSpec, Spectrum};
use crate::recursion::{run_trajectory_on, MomentSimulator};
use crate::schedule::{Schedule, ScheduleKind};

/// Best cosine run at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePoint {
    pub horizon: u64,
    pub best_risk: f64,
    pub best_schedule: Schedule,
    pub best_averaging: AveragingConfig,
}

/// Warmup and floor applied to every cosine run of an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineShape {
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub floor_frac: f64,
}

impl Default for CosineShape {
    fn default() -> Self {
        Self {
            warmup_frac: 0.0,
            floor_frac: 0.0,
        }
    }
}

impl CosineShape {
    pub fn schedule(&self, lr: f64, horizon: u64) -> Result<Schedule> {
        Schedule::new(
            ScheduleKind::Cosine {
                horizon,
                warmup_frac: self.warmup_frac,
                floor_frac: self.floor_frac,
            },
            lr,
        )
    }
}

fn check_horizons(horizons: &[u64]) -> Result<()> {
    if horizons.is_empty() {
        return Err(Error::InvalidInput("horizon list is empty".into()));
    }
    if horizons[0] == 0 || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "horizons must be positive and strictly ascending".into(),
        ));
    }
    Ok(())
}

fn check_grid<T>(grid: &[T], name: &str) -> Result<()> {
    if grid.is_empty() {
        Err(Error::InvalidInput(format!("{name} grid is empty")))
    } else {
        Ok(())
    }
}

/// Final risk of every averaging rule, or `None` if the run diverged.
fn final_risks(
    spectrum: &Spectrum,
    noise_var: f64,
    schedule: &Schedule,
    n: u64,
    averaging: &[AveragingConfig],
) -> Result<Option<Vec<f64>>> {
    match run_trajectory_on(spectrum, noise_var, schedule, n, averaging, &[n]) {
        Ok(trace) => Ok(Some(trace.final_row().excess_avg.clone())),
        Err(e) if e.is_divergence() => Ok(None),
        Err(e) => Err(e),
    }
}

fn argmin(xs: &[f64]) -> Option<usize> {
    xs.iter()
        .enumerate()
        .filter(|(_, x)| x.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}

/// Tunes a fresh cosine schedule for every horizon over `lr_grid` ×
/// `averaging_grid`. Runs `|horizons| × |lr_grid|` separate trajectories;
/// divergent grid points are skipped.
pub fn build_cosine_envelope(
    spec: &ProblemSpec,
    horizons: &[u64],
    lr_grid: &[f64],
    averaging_grid: &[AveragingConfig],
    shape: CosineShape,
) -> Result<Vec<EnvelopePoint>> {
    let spectrum = build_spectrum(spec)?;
    build_cosine_envelope_on(&spectrum, spec.noise_var, horizons, lr_grid, averaging_grid, shape)
}

pub fn build_cosine_envelope_on(
    spectrum: &Spectrum,
    noise_var: f64,
    horizons: &[u64],
    lr_grid: &[f64],
    averaging_grid: &[AveragingConfig],
    shape: CosineShape,
) -> Result<Vec<EnvelopePoint>> {
    check_horizons(horizons)?;
    check_grid(lr_grid, "learning-rate")?;
    check_grid(averaging_grid, "averaging")?;
    let jobs: Vec<(u64, f64)> = horizons
        .iter()
        .flat_map(|&h| lr_grid.iter().map(move |&lr| (h, lr)))
        .collect();
    let results: Vec<Option<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(h, lr)| final_risks(spectrum, noise_var, &shape.schedule(lr, h)?, h, averaging_grid))
        .collect::<Result<_>>()?;

    horizons
        .iter()
        .enumerate()
        .map(|(hi, &h)| {
            let mut best: Option<(f64, usize, usize)> = None;
            for li in 0..lr_grid.len() {
                if let Some(risks) = &results[hi * lr_grid.len() + li] {
                    for (ai, &r) in risks.iter().enumerate() {
                        if r.is_finite() && best.is_none_or(|(b, _, _)| r < b) {
                            best = Some((r, li, ai));
                        }
                    }
                }
            }
            let (best_risk, li, ai) = best.ok_or_else(|| Error::Divergence {
                step: h,
                lr: lr_grid[0],
                detail: format!("every cosine run at horizon {h} diverged"),
            })?;
            Ok(EnvelopePoint {
                horizon: h,
                best_risk,
                best_schedule: shape.schedule(lr_grid[li], h)?,
                best_averaging: averaging_grid[ai],
            })
        })
        .collect()
}

/// One anytime checkpoint: risks of every averaging rule and the best one.
#[derive(Debug, Clone, PartialEq)]
pub struct AnytimePoint {
    pub horizon: u64,
    pub risks: Vec<f64>,
    pub best_risk: f64,
    pub best_averaging: AveragingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnytimeEvaluation {
    pub schedule: Schedule,
    pub averaging: Vec<AveragingConfig>,
    pub points: Vec<AnytimePoint>,
    /// SGD steps executed, which equals `max(horizons)` for a single run.
    pub steps_taken: u64,
}

impl AnytimeEvaluation {
    pub fn best_risks(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.best_risk).collect()
    }
}

/// Evaluates a horizon-free schedule from a single trajectory read at every
/// horizon.
pub fn evaluate_anytime(
    spec: &ProblemSpec,
    schedule: &Schedule,
    averaging_grid: &[AveragingConfig],
    horizons: &[u64],
) -> Result<AnytimeEvaluation> {
    let spectrum = build_spectrum(spec)?;
    evaluate_anytime_on(&spectrum, spec.noise_var, schedule, averaging_grid, horizons)
}

pub fn evaluate_anytime_on(
    spectrum: &Spectrum,
    noise_var: f64,
    schedule: &Schedule,
    averaging_grid: &[AveragingConfig],
    horizons: &[u64],
) -> Result<AnytimeEvaluation> {
    if schedule.horizon_dependent() {
        return Err(Error::InvalidInput(format!(
            "{} depends on the horizon; evaluate WSD through wsd_branches",
            schedule.label()
        )));
    }
    check_horizons(horizons)?;
    check_grid(averaging_grid, "averaging")?;
    let n = *horizons.last().expect("checked nonempty");
    let trace = run_trajectory_on(spectrum, noise_var, schedule, n, averaging_grid, horizons)?;
    let points = horizons
        .iter()
        .map(|&h| {
            let row = trace.row_at(h).expect("every horizon is a checkpoint");
            let i = argmin(&row.excess_avg).ok_or_else(|| Error::Divergence {
                step: h,
                lr: schedule.base_lr,
                detail: "no finite averaged risk".into(),
            })?;
            Ok(AnytimePoint {
                horizon: h,
                risks: row.excess_avg.clone(),
                best_risk: row.excess_avg[i],
                best_averaging: averaging_grid[i],
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnytimeEvaluation {
        schedule: schedule.clone(),
        averaging: averaging_grid.to_vec(),
        points,
        steps_taken: trace.steps_taken,
    })
}

/// Last-iterate risks of all decay branches at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct WsdHorizon {
    pub horizon: u64,
    /// `(decay start fraction, last-iterate risk)` per branch.
    pub branches: Vec<(f64, f64)>,
    pub best_risk: f64,
    pub best_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsdBranches {
    pub base_lr: f64,
    pub floor_frac: f64,
    pub horizons: Vec<WsdHorizon>,
    /// Steps on the shared constant trunk.
    pub trunk_steps: u64,
    /// Steps taken across all decay tails.
    pub branch_steps: u64,
}

/// Runs one constant-`lr` trunk to `max(horizons)` and, for every horizon
/// `N` and fraction `p`, branches at step `⌊pN⌋` into a linear decay that
/// reaches `floor_frac · lr` at `N`. Reports last-iterate risks. A divergent
/// trunk or branch is reported as an infinite risk.
pub fn wsd_branches(
    spec: &ProblemSpec,
    lr: f64,
    horizons: &[u64],
    decay_fracs: &[f64],
    floor_frac: f64,
) -> Result<WsdBranches> {
    let spectrum = build_spectrum(spec)?;
    wsd_branches_on(&spectrum, spec.noise_var, lr, horizons, decay_fracs, floor_frac)
}

pub fn wsd_branches_on(
    spectrum: &Spectrum,
    noise_var: f64,
    lr: f64,
    horizons: &[u64],
    decay_fracs: &[f64],
    floor_frac: f64,
) -> Result<WsdBranches> {
    check_horizons(horizons)?;
    check_grid(decay_fracs, "decay-fraction")?;
    if let Some(&p) = decay_fracs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::param("decay_fracs", p, "must lie in (0, 1)"));
    }
    let trunk_len = *horizons.last().expect("checked nonempty");
    let mut points: Vec<(u64, usize, usize)> = Vec::new();
    for (hi, &h) in horizons.iter().enumerate() {
        for (pi, &p) in decay_fracs.iter().enumerate() {
            // Validates the branch schedule up front.
            Schedule::wsd(lr, p, h, floor_frac)?;
            let at = (p * h as f64).floor() as u64;
            if at > trunk_len {
                return Err(Error::InvalidInput(format!(
                    "branch point {at} beyond the trunk length {trunk_len}"
                )));
            }
            points.push((at, hi, pi));
        }
    }
    points.sort_unstable();

    let mut risks = vec![vec![f64::INFINITY; decay_fracs.len()]; horizons.len()];
    let mut trunk = MomentSimulator::new(spectrum, noise_var, Schedule::constant(lr)?, &[], &[])?;
    let mut trunk_ok = true;
    let mut branch_steps = 0;
    for (at, hi, pi) in points {
        if trunk_ok {
            match trunk.advance_to(at) {
                Ok(()) => {}
                Err(e) if e.is_divergence() => trunk_ok = false,
                Err(e) => return Err(e),
            }
        }
        if !trunk_ok {
            continue;
        }
        let h = horizons[hi];
        let mut branch = trunk.clone();
        branch.set_schedule(Schedule::wsd(lr, decay_fracs[pi], h, floor_frac)?);
        let before = branch.steps_taken();
        match branch.advance_to(h) {
            Ok(()) => risks[hi][pi] = branch.last_risk(),
            Err(e) if e.is_divergence() => {}
            Err(e) => return Err(e),
        }
        branch_steps += branch.steps_taken() - before;
    }

    let horizons_out = horizons
        .iter()
        .zip(risks)
        .map(|(&h, rs)| {
            let (best_risk, best_frac) = match argmin(&rs) {
                Some(i) => (rs[i], decay_fracs[i]),
                None => (f64::INFINITY, decay_fracs[0]),
            };
            WsdHorizon {
                horizon: h,
                branches: decay_fracs.iter().copied().zip(rs).collect(),
                best_risk,
                best_frac,
            }
        })
        .collect();
    Ok(WsdBranches {
        base_lr: lr,
        floor_frac,
        horizons: horizons_out,
        trunk_steps: trunk.steps_taken(),
        branch_steps,
    })
}

/// Rule for picking one configuration to use at every horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Minimise the mean relative gap to the envelope over checkpoints.
    #[default]
    MinMean,
    /// Minimise the worst relative gap.
    MinMax,
}

/// A configuration evaluated at every horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub schedule: Schedule,
    pub risks: Vec<f64>,
}

/// Index of the candidate chosen by `rule`. Ties go to the smaller base
/// learning rate, then the smaller shape parameter.
pub fn anytime_hyperparameter_selection(
    candidates: &[Candidate],
    envelope: &[f64],
    rule: SelectionRule,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to select from".into()));
    }
    if envelope.is_empty() {
        return Err(Error::InvalidInput("empty envelope".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.risks.len() != envelope.len()) {
        return Err(Error::InvalidInput(format!(
            "{} has {} risks for {} horizons",
            c.schedule.label(),
            c.risks.len(),
            envelope.len()
        )));
    }
    let score = |c: &Candidate| -> f64 {
        let gaps = c.risks.iter().zip(envelope).map(|(r, e)| (r - e) / e);
        let s = match rule {
            SelectionRule::MinMean => gaps.sum::<f64>() / envelope.len() as f64,
            SelectionRule::MinMax => gaps.fold(f64::NEG_INFINITY, f64::max),
        };
        if s.is_nan() {
            f64::INFINITY
        } else {
            s
        }
    };
    let scored: Vec<(f64, f64, f64)> = candidates
        .iter()
        .map(|c| (score(c), c.schedule.base_lr, c.schedule.shape_param()))
        .collect();
    let best = (0..candidates.len())
        .min_by(|&i, &j| {
            let (a, b) = (scored[i], scored[j]);
            a.0.total_cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        })
        .expect("nonempty");
    Ok(best)
}

/// Difference between a method and the envelope at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub horizon: u64,
    pub method: String,
    pub risk: f64,
    pub envelope: f64,
    pub delta: f64,
    pub relative_delta: f64,
}

pub fn gap_rows(method: &str, horizons: &[u64], risks: &[f64], envelope: &[f64]) -> Vec<GapRow> {
    horizons
        .iter()
        .zip(risks.iter().zip(envelope))
        .map(|(&h, (&r, &e))| GapRow {
            horizon: h,
            method: method.to_string(),
            risk: r,
            envelope: e,
            delta: r - e,
            relative_delta: (r - e) / e,
        })
        .collect()
}

pub fn write_gap_csv<W: Write>(rows: &[GapRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "horizon,method,risk,envelope,delta,relative_delta")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.horizon, r.method, r.risk, r.envelope, r.delta, r.relative_delta
        )?;
    }
    Ok(())
}

pub fn write_envelope_csv<W: Write>(points: &[EnvelopePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "horizon,best_risk,base_lr,warmup_frac,floor_frac,averaging")?;
    for p in points {
        let (warm, floor) = match p.best_schedule.kind {
            ScheduleKind::Cosine {
                warmup_frac,
                floor_frac,
                ..
            } => (warmup_frac, floor_frac),
            _ => (0.0, 0.0),
        };
        writeln!(
            out,
            "{},{:.16e},{:.16e},{},{},{}",
            p.horizon,
            p.best_risk,
            p.best_schedule.base_lr,
            warm,
            floor,
            p.best_averaging.label()
        )?;
    }
    Ok(())
}

/// Grids for a full anytime-versus-cosine comparison on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonGrid {
    pub horizons: Vec<u64>,
    /// Absolute base learning rates.
    pub lr_grid: Vec<f64>,
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub wsd_fracs: Vec<f64>,
    #[serde(default)]
    pub wsd_floor: f64,
    #[serde(default)]
    pub anytime_averaging: Vec<AveragingConfig>,
    #[serde(default = "last_iterate_only")]
    pub cosine_averaging: Vec<AveragingConfig>,
    #[serde(default)]
    pub cosine_shape: CosineShape,
    #[serde(default)]
    pub rule: SelectionRule,
}

fn last_iterate_only() -> Vec<AveragingConfig> {
    vec![AveragingConfig::None]
}

/// Selected configuration of one method and its risks per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub selected: Schedule,
    pub risks: Vec<f64>,
    /// Best averaging label per horizon (or decay fraction for WSD).
    pub detail: Vec<String>,
    /// Best risk over the whole sweep, chosen separately at each horizon.
    pub per_horizon_optimal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub horizons: Vec<u64>,
    pub envelope: Vec<EnvelopePoint>,
    pub methods: Vec<MethodResult>,
}

impl Comparison {
    pub fn envelope_risks(&self) -> Vec<f64> {
        self.envelope.iter().map(|p| p.best_risk).collect()
    }

    pub fn gap_rows(&self) -> Vec<GapRow> {
        let env = self.envelope_risks();
        self.methods
            .iter()
            .flat_map(|m| gap_rows(&m.name, &self.horizons, &m.risks, &env))
            .collect()
    }
}

fn select_method(
    name: &str,
    candidates: Vec<(Candidate, Vec<String>)>,
    envelope: &[f64],
    rule: SelectionRule,
) -> Result<MethodResult> {
    let plain: Vec<Candidate> = candidates.iter().map(|(c, _)| c.clone()).collect();
    let idx = anytime_hyperparameter_selection(&plain, envelope, rule)?;
    let per_horizon_optimal = (0..envelope.len())
        .map(|h| plain.iter().map(|c| c.risks[h]).fold(f64::INFINITY, f64::min))
        .collect();
    let (chosen, detail) = candidates.into_iter().nth(idx).expect("index in range");
    Ok(MethodResult {
        name: name.to_string(),
        selected: chosen.schedule,
        risks: chosen.risks,
        detail,
        per_horizon_optimal,
    })
}

/// Cosine envelope plus constant+averaging, `√(α/(t+α))`+averaging and WSD,
/// each with one configuration selected for all horizons.
///
/// The averaged methods are skipped when `anytime_averaging` is empty,
/// `√(α/(t+α))` when `alpha_grid` is empty and WSD when `wsd_fracs` is empty.
pub fn compare_schedules(spec: &ProblemSpec, grid: &ComparisonGrid) -> Result<Comparison> {
    let spectrum = build_spectrum(spec)?;
    let noise = spec.noise_var;
    check_horizons(&grid.horizons)?;
    check_grid(&grid.lr_grid, "learning-rate")?;
    let with_averaging = !grid.anytime_averaging.is_empty();
    let envelope = build_cosine_envelope_on(
        &spectrum,
        noise,
        &grid.horizons,
        &grid.lr_grid,
        &grid.cosine_averaging,
        grid.cosine_shape,
    )?;
    let env: Vec<f64> = envelope.iter().map(|p| p.best_risk).collect();

    let anytime = |sched: Schedule| -> Result<(Candidate, Vec<String>)> {
        match evaluate_anytime_on(&spectrum, noise, &sched, &grid.anytime_averaging, &grid.horizons) {
            Ok(ev) => {
                let detail = ev.points.iter().map(|p| p.best_averaging.label()).collect();
                Ok((
                    Candidate {
                        risks: ev.best_risks(),
                        schedule: sched,
                    },
                    detail,
                ))
            }
            Err(e) if e.is_divergence() => Ok((
                Candidate {
                    risks: vec![f64::INFINITY; grid.horizons.len()],
                    schedule: sched,
                },
                vec!["diverged".into(); grid.horizons.len()],
            )),
            Err(e) => Err(e),
        }
    };

    let averaged_lrs: &[f64] = if with_averaging { &grid.lr_grid } else { &[] };
    let constant: Vec<(Candidate, Vec<String>)> = averaged_lrs
        .par_iter()
        .map(|&lr| anytime(Schedule::constant(lr)?))
        .collect::<Result<_>>()?;
    let sqrt_jobs: Vec<(f64, f64)> = averaged_lrs
        .iter()
        .flat_map(|&lr| grid.alpha_grid.iter().map(move |&a| (lr, a)))
        .collect();
    let sqrt_alpha: Vec<(Candidate, Vec<String>)> = sqrt_jobs
        .par_iter()
        .map(|&(lr, a)| anytime(Schedule::sqrt_alpha(lr, a)?))
        .collect::<Result<_>>()?;
    let wsd_lrs: &[f64] = if grid.wsd_fracs.is_empty() { &[] } else { &grid.lr_grid };
    let wsd_runs: Vec<WsdBranches> = wsd_lrs
        .par_iter()
        .map(|&lr| wsd_branches_on(&spectrum, noise, lr, &grid.horizons, &grid.wsd_fracs, grid.wsd_floor))
        .collect::<Result<_>>()?;
    let last = *grid.horizons.last().expect("checked nonempty");
    let mut wsd = Vec::new();
    for run in &wsd_runs {
        for (pi, &p) in grid.wsd_fracs.iter().enumerate() {
            wsd.push((
                Candidate {
                    schedule: Schedule::wsd(run.base_lr, p, last, grid.wsd_floor)?,
                    risks: run.horizons.iter().map(|h| h.branches[pi].1).collect(),
                },
                vec![format!("p={p}"); grid.horizons.len()],
            ));
        }
    }

    let mut methods = Vec::new();
    for (name, candidates) in [("constant_avg", constant), ("sqrt_alpha_avg", sqrt_alpha), ("wsd", wsd)] {
        if !candidates.is_empty() {
            methods.push(select_method(name, candidates, &env, grid.rule)?);
        }
    }
    Ok(Comparison {
        horizons: grid.horizons.clone(),
        envelope,
        methods,
    })
}
