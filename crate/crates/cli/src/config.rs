//! Run configuration document.

use std::path::{Path, PathBuf};

use anytime_core::envelope::{ComparisonGrid, CosineShape, SelectionRule};
use anytime_core::{build_spectrum, AveragingConfig, ProblemSpec, Schedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub schedules: Vec<Schedule>,
    #[serde(default)]
    pub averaging: Vec<AveragingConfig>,
    /// Run length for `simulate` and `validate`.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    /// Horizons for `envelope`.
    #[serde(default)]
    pub horizons: Vec<u64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub rates: Option<RatesConfig>,
    #[serde(default)]
    pub seeds: SeedPolicy,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lr_grid: Vec<f64>,
    /// Read `lr_grid` in units of `1 / Tr(H)`.
    #[serde(default)]
    pub lr_relative_to_trace: bool,
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub wsd_fracs: Vec<f64>,
    #[serde(default)]
    pub wsd_floor: f64,
    #[serde(default)]
    pub anytime_averaging: Vec<AveragingConfig>,
    #[serde(default = "last_iterate")]
    pub cosine_averaging: Vec<AveragingConfig>,
    #[serde(default)]
    pub cosine_shape: CosineShape,
    #[serde(default)]
    pub rule: SelectionRule,
}

fn last_iterate() -> Vec<AveragingConfig> {
    vec![AveragingConfig::None]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exponents {
    pub capacity: f64,
    pub source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    /// `(a, b)` pairs; the problem's dimension and noise are reused.
    pub instances: Vec<Exponents>,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<u64>,
    /// Base learning rate as a fraction of `1 / Tr(H)`.
    #[serde(default = "default_lr_fraction")]
    pub lr_fraction: f64,
    #[serde(default = "default_exclude")]
    pub exclude_smallest: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_ladder() -> Vec<u64> {
    (10..=16).map(|k| 1u64 << k).collect()
}

fn default_lr_fraction() -> f64 {
    0.5
}

fn default_exclude() -> usize {
    1
}

fn default_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedPolicy {
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    #[serde(default = "default_seed_count")]
    pub count: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Also test the last iterate, not only the averaged columns.
    #[serde(default)]
    pub include_last: bool,
}

fn default_base_seed() -> u64 {
    0x5eed
}

fn default_seed_count() -> usize {
    200
}

fn default_batch() -> usize {
    1
}

impl Default for SeedPolicy {
    fn default() -> Self {
        Self {
            base_seed: default_base_seed(),
            count: default_seed_count(),
            batch_size: default_batch(),
            include_last: false,
        }
    }
}

impl RunConfig {
    /// Parses a config document, or a manifest that embeds one.
    pub fn load(path: &Path) -> Result<(Self, Value), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if value.get("manifest_version").is_some() {
            value = value
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Config("manifest has no embedded config".into()))?;
        }
        let config = Self::from_value(value.clone())?;
        Ok((config, value))
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let config: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        self.problem.validate()?;
        for s in &self.schedules {
            s.validate()?;
        }
        for a in &self.averaging {
            a.validate()?;
        }
        if let Some(sweep) = &self.sweep {
            for a in sweep.anytime_averaging.iter().chain(&sweep.cosine_averaging) {
                a.validate()?;
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs: must be at least 1".into()));
        }
        if self.seeds.count < 2 {
            return Err(CliError::Config("seeds.count: need at least 2 seeds".into()));
        }
        if self.seeds.batch_size == 0 {
            return Err(CliError::Config("seeds.batch_size: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn require_steps(&self) -> Result<u64, CliError> {
        self.steps
            .ok_or_else(|| CliError::Config("steps: required for this command".into()))
    }

    pub fn comparison_grid(&self) -> Result<ComparisonGrid, CliError> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("sweep: required for the envelope command".into()))?;
        if self.horizons.is_empty() {
            return Err(CliError::Config("horizons: required for the envelope command".into()));
        }
        let unit = if sweep.lr_relative_to_trace {
            1.0 / build_spectrum(&self.problem)?.trace
        } else {
            1.0
        };
        Ok(ComparisonGrid {
            horizons: self.horizons.clone(),
            lr_grid: sweep.lr_grid.iter().map(|x| x * unit).collect(),
            alpha_grid: sweep.alpha_grid.clone(),
            wsd_fracs: sweep.wsd_fracs.clone(),
            wsd_floor: sweep.wsd_floor,
            anytime_averaging: sweep.anytime_averaging.clone(),
            cosine_averaging: sweep.cosine_averaging.clone(),
            cosine_shape: sweep.cosine_shape,
            rule: sweep.rule,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "problem": {"dimension": 10, "capacity": 1.5, "source": 1.5, "noise_var": 0.01},
            "schedules": [{"kind": "constant", "base_lr": 0.1}],
            "steps": 100
        })
    }

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::from_value(minimal()).unwrap();
        assert_eq!(c.steps, Some(100));
        assert_eq!(c.seeds, SeedPolicy::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal();
        v["schedulez"] = json!([]);
        assert!(matches!(RunConfig::from_value(v), Err(CliError::Config(_))));
        let mut v = minimal();
        v["problem"]["capcity"] = json!(1.5);
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn gamma_out_of_range_names_field() {
        let mut v = minimal();
        v["schedules"] = json!([{"kind": "poly_decay", "base_lr": 0.1, "gamma": 1.5}]);
        let msg = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(msg.contains("gamma") && msg.contains("(0, 1)"), "{msg}");
    }

    #[test]
    fn relative_lr_grid_is_scaled() {
        let mut v = minimal();
        v["horizons"] = json!([10]);
        v["sweep"] = json!({"lr_grid": [1.0], "lr_relative_to_trace": true});
        let c = RunConfig::from_value(v).unwrap();
        let g = c.comparison_grid().unwrap();
        let tr = build_spectrum(&c.problem).unwrap().trace;
        assert!((g.lr_grid[0] * tr - 1.0).abs() < 1e-15);
        assert_eq!(g.cosine_averaging, vec![AveragingConfig::None]);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
        assert!(n >= 4);
    }
}
