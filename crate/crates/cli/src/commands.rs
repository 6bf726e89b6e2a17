//! The four subcommands. Each writes its files through an [`OutputDir`] and
//! returns per-run statuses plus an optional deferred failure, so the
//! manifest is always written before the process exits.

use std::io::Write;

use anytime_core::envelope::{write_envelope_csv, write_gap_csv, Comparison};
use anytime_core::svg::{comparison_svg, Series};
use anytime_core::theory::{fit_rate_exponent, predicted_rate};
use anytime_core::{
    build_spectrum, compare_schedules, gamma_star, max_stable_lr, monte_carlo_risk, run_trajectory,
    AveragingConfig, MonteCarloOptions, RiskTrace, Schedule, Start,
};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{OutputDir, RunStatus};

pub struct Outcome {
    pub runs: Vec<RunStatus>,
    pub failure: Option<CliError>,
}

fn status(name: impl Into<String>, status: &str) -> RunStatus {
    RunStatus {
        name: name.into(),
        status: status.to_string(),
    }
}

fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Trace with only the last iterate, or the last iterate and one averaging
/// column.
fn write_pair_csv(trace: &RiskTrace, column: Option<usize>, out: &mut Vec<u8>) -> std::io::Result<()> {
    match column {
        None => writeln!(out, "step,lr,excess_last")?,
        Some(i) => writeln!(out, "step,lr,excess_last,excess_{}", trace.averaging[i].label())?,
    }
    for row in &trace.rows {
        write!(out, "{},{:.16e},{:.16e}", row.step, row.lr, row.excess_last)?;
        if let Some(i) = column {
            write!(out, ",{:.16e}", row.excess_avg[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let n = cfg.require_steps()?;
    if cfg.schedules.is_empty() {
        return Err(CliError::Config("schedules: at least one schedule is required".into()));
    }
    let spectrum = build_spectrum(&cfg.problem)?;
    out.write("spectrum.csv", |buf| spectrum.write_csv(buf))?;
    let results: Vec<_> = cfg
        .schedules
        .par_iter()
        .map(|s| run_trajectory(&cfg.problem, s, n, &cfg.averaging, &cfg.checkpoints))
        .collect();

    let mut runs = Vec::new();
    let mut failure = None;
    for (i, (sched, result)) in cfg.schedules.iter().zip(results).enumerate() {
        let name = format!("trace_{i:02}_{}", slug(&sched.label()));
        match result {
            Ok(trace) => {
                if cfg.averaging.is_empty() {
                    out.write(&format!("{name}.csv"), |b| write_pair_csv(&trace, None, b))?;
                } else {
                    for (j, a) in cfg.averaging.iter().enumerate() {
                        let file = format!("{name}_{}.csv", slug(&a.label()));
                        let col = (*a != AveragingConfig::None).then_some(j);
                        out.write(&file, |b| write_pair_csv(&trace, col, b))?;
                    }
                }
                let fin = trace.final_row();
                println!("{}: final excess_last {:.6e}", sched.label(), fin.excess_last);
                runs.push(status(sched.label(), "ok"));
            }
            Err(e) if e.is_divergence() => {
                eprintln!("{}: {e}", sched.label());
                runs.push(status(sched.label(), "diverged"));
                failure.get_or_insert(CliError::Core(e));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Outcome { runs, failure })
}

fn write_selection_csv(cmp: &Comparison, out: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(out, "method,selected,horizon,detail")?;
    for m in &cmp.methods {
        for (h, d) in cmp.horizons.iter().zip(&m.detail) {
            writeln!(out, "{},{},{},{}", m.name, m.selected.label(), h, d)?;
        }
    }
    Ok(())
}

pub fn envelope(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let grid = cfg.comparison_grid()?;
    let cmp = compare_schedules(&cfg.problem, &grid)?;
    let env = cmp.envelope_risks();
    let mut gaps = cmp.gap_rows();
    for m in &cmp.methods {
        gaps.extend(anytime_core::envelope::gap_rows(
            &format!("{}_per_horizon", m.name),
            &cmp.horizons,
            &m.per_horizon_optimal,
            &env,
        ));
    }
    out.write("envelope.csv", |b| write_envelope_csv(&cmp.envelope, b))?;
    out.write("gap.csv", |b| write_gap_csv(&gaps, b))?;
    out.write("selection.csv", |b| write_selection_csv(&cmp, b))?;

    let mut risks = vec![Series::new("cosine envelope", &cmp.horizons, &env)];
    let mut deltas = Vec::new();
    for m in &cmp.methods {
        risks.push(Series::new(m.name.clone(), &cmp.horizons, &m.risks));
        let rel: Vec<f64> = m.risks.iter().zip(&env).map(|(r, e)| (r - e) / e).collect();
        deltas.push(Series::new(m.name.clone(), &cmp.horizons, &rel));
    }
    let title = format!("a={}, b={}", cfg.problem.capacity, cfg.problem.source);
    let svg = comparison_svg(&title, &risks, &deltas);
    out.write("figure.svg", |b| b.write_all(svg.as_bytes()))?;

    let mut runs = vec![status("cosine_envelope", "ok")];
    for m in &cmp.methods {
        let worst = m
            .risks
            .iter()
            .zip(&env)
            .map(|(r, e)| (r - e) / e)
            .fold(f64::NEG_INFINITY, f64::max);
        println!("{}: {} worst relative gap {:+.4}", m.name, m.selected.label(), worst);
        runs.push(status(m.name.clone(), "ok"));
    }
    Ok(Outcome { runs, failure: None })
}

struct RateRow {
    a: f64,
    b: f64,
    gamma: f64,
    predicted: f64,
    fitted: f64,
    r2: f64,
    pass: bool,
}

pub fn rates(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let rc = cfg
        .rates
        .as_ref()
        .ok_or_else(|| CliError::Config("rates: required for the rates command".into()))?;
    if rc.ladder.len() < rc.exclude_smallest + 4 {
        return Err(CliError::Config(format!(
            "rates.ladder: need at least {} horizons after excluding {}",
            4,
            rc.exclude_smallest
        )));
    }
    if !(rc.lr_fraction > 0.0) {
        return Err(CliError::Config("rates.lr_fraction: must be > 0".into()));
    }
    let n = *rc.ladder.last().expect("nonempty");
    let rows: Vec<Result<RateRow, CliError>> = rc
        .instances
        .par_iter()
        .map(|inst| {
            let mut spec = cfg.problem.clone();
            spec.capacity = inst.capacity;
            spec.source = inst.source;
            let gamma = gamma_star(inst.capacity, inst.source)?;
            let lr = rc.lr_fraction * max_stable_lr(&spec)?;
            let sched = if gamma > 0.0 {
                Schedule::poly_decay(lr, gamma)?
            } else {
                Schedule::constant(lr)?
            };
            let trace = run_trajectory(&spec, &sched, n, &[AveragingConfig::tail(1.0)], &rc.ladder)?;
            let points: Vec<(f64, f64)> = rc.ladder[rc.exclude_smallest..]
                .iter()
                .map(|&h| (h as f64, trace.row_at(h).expect("ladder is checkpointed").excess_avg[0]))
                .collect();
            let fit = fit_rate_exponent(&points)?;
            let predicted = predicted_rate(inst.capacity, inst.source)?.exponent;
            let fitted = -fit.slope;
            Ok(RateRow {
                a: inst.capacity,
                b: inst.source,
                gamma,
                predicted,
                fitted,
                r2: fit.r_squared,
                pass: (fitted - predicted).abs() <= rc.tolerance,
            })
        })
        .collect();
    let rows: Vec<RateRow> = rows.into_iter().collect::<Result<_, _>>()?;
    out.write("rates.csv", |buf| {
        writeln!(buf, "a,b,gamma,predicted_exponent,fitted_exponent,r2,pass")?;
        for r in &rows {
            writeln!(
                buf,
                "{},{},{},{:.16e},{:.16e},{:.16e},{}",
                r.a, r.b, r.gamma, r.predicted, r.fitted, r.r2, r.pass
            )?;
        }
        Ok(())
    })?;
    let mut runs = Vec::new();
    let mut failed = 0;
    for r in &rows {
        println!(
            "a={} b={} gamma={:.4}: fitted {:.4} predicted {:.4} {}",
            r.a,
            r.b,
            r.gamma,
            r.fitted,
            r.predicted,
            if r.pass { "PASS" } else { "FAIL" }
        );
        runs.push(status(format!("a={},b={}", r.a, r.b), if r.pass { "pass" } else { "fail" }));
        failed += usize::from(!r.pass);
    }
    let failure = (failed > 0).then(|| CliError::Failed(format!("{failed} rate check(s) outside tolerance")));
    Ok(Outcome { runs, failure })
}

/// Knobs that exist only to exercise the validator.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateHooks {
    /// Multiplies σ² inside the exact recursion only.
    pub corrupt_noise_factor: Option<f64>,
}

struct ZCell {
    schedule: String,
    step: u64,
    column: String,
    exact: f64,
    mean: f64,
    stderr: f64,
    z: f64,
}

fn z_score(mean: f64, exact: f64, stderr: f64) -> f64 {
    let diff = mean - exact;
    if stderr > 0.0 {
        diff / stderr
    } else if diff.abs() <= 1e-12 * exact.abs().max(f64::MIN_POSITIVE) {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn validate(cfg: &RunConfig, out: &mut OutputDir, hooks: ValidateHooks) -> Result<Outcome, CliError> {
    let n = cfg.require_steps()?;
    if cfg.schedules.is_empty() {
        return Err(CliError::Config("schedules: at least one schedule is required".into()));
    }
    let opts = MonteCarloOptions {
        batch_size: cfg.seeds.batch_size,
        seeds: cfg.seeds.count,
        base_seed: cfg.seeds.base_seed,
        start: Start::Origin,
    };
    if opts.batch_size != 1 {
        return Err(CliError::Config(
            "seeds.batch_size: the exact recursion models batch size 1".into(),
        ));
    }
    let exact_spec = match hooks.corrupt_noise_factor {
        Some(f) => cfg.problem.with_noise(cfg.problem.noise_var * f),
        None => cfg.problem.clone(),
    };
    let with_last = cfg.seeds.include_last || cfg.averaging.is_empty();
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for sched in &cfg.schedules {
        let exact = run_trajectory(&exact_spec, sched, n, &cfg.averaging, &cfg.checkpoints)?;
        let mc = monte_carlo_risk(&cfg.problem, sched, n, &cfg.averaging, &cfg.checkpoints, &opts)?;
        if !mc.divergent_seeds.is_empty() {
            return Err(anytime_core::Error::Divergence {
                step: n,
                lr: sched.base_lr,
                detail: format!("{} Monte Carlo seeds diverged", mc.divergent_seeds.len()),
            }
            .into());
        }
        for (e, m) in exact.rows.iter().zip(&mc.rows).filter(|(e, _)| e.step > 0) {
            let mut push = |column: String, exact: f64, est: anytime_core::empirical::Estimate| {
                cells.push(ZCell {
                    schedule: sched.label(),
                    step: e.step,
                    column,
                    exact,
                    mean: est.mean,
                    stderr: est.stderr,
                    z: z_score(est.mean, exact, est.stderr),
                })
            };
            if with_last {
                push("last".into(), e.excess_last, m.last);
            }
            for (i, a) in cfg.averaging.iter().enumerate() {
                push(a.label(), e.excess_avg[i], m.averaged[i]);
            }
        }
        runs.push(status(sched.label(), "ok"));
    }

    let k = cells.len().max(1) as f64;
    let bonferroni = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - 0.05 / (2.0 * k));
    let threshold = bonferroni.max(3.0);
    out.write("validate.csv", |buf| {
        writeln!(buf, "schedule,step,column,exact,mc_mean,stderr,z,pass")?;
        for c in &cells {
            writeln!(
                buf,
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.6},{}",
                c.schedule,
                c.step,
                c.column,
                c.exact,
                c.mean,
                c.stderr,
                c.z,
                c.z.abs() <= threshold
            )?;
        }
        Ok(())
    })?;
    let failures = cells.iter().filter(|c| !(c.z.abs() <= threshold)).count();
    let worst = cells.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    println!(
        "{} cells, max |z| {:.3}, threshold {:.3}, failures {}",
        cells.len(),
        worst,
        threshold,
        failures
    );
    let failure = (failures > 0).then(|| {
        CliError::Failed(format!(
            "{failures} of {} cells exceed |z| = {threshold:.3}",
            cells.len()
        ))
    });
    Ok(Outcome { runs, failure })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_filesystem_safe() {
        assert_eq!(slug("poly(lr=0.1,gamma=0.5)"), "poly_lr_0.1_gamma_0.5");
        assert_eq!(slug("avg_f6.25"), "avg_f6.25");
    }

    #[test]
    fn zero_stderr_z() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert!(z_score(1.1, 1.0, 0.0).is_infinite());
        assert!((z_score(1.2, 1.0, 0.1) - 2.0).abs() < 1e-12);
    }
}
