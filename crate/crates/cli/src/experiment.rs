// SPDX-License-Identifier: Apache-2.0

//! Running a config end to end and writing its results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aoi_core::dp::{extract_cycle_policy, finite_horizon_dp, DpOptions, DEFAULT_MEMORY_BUDGET};
use aoi_core::sim::{detect_cycle, simulate};
use aoi_core::structure::{check_strong_switch, StateActionSet};
use aoi_core::{AgeVector, Cycle, SimulationResult, TruncatedBox};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PolicySpec};
use crate::CliError;

/// Step limit for cycle detection on simulated policies.
const CYCLE_STEPS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    /// Canonical text of the resolved config.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSummary {
    pub optimal_average_cost: f64,
    pub horizon: u64,
    pub a_max: u64,
    pub initial_state: AgeVector,
    pub truncation_report: f64,
    pub warnings: Vec<String>,
    /// Cycle followed by the first-stage table (reliable channels only).
    pub cycle: Option<Cycle>,
    /// Strong-switch violations on that cycle, if one was extracted.
    pub switch_violations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: String,
    pub result: SimulationResult,
    pub cycle: Option<Cycle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub setting: String,
    pub provenance: Provenance,
    pub dp: Option<DpSummary>,
    pub policies: Vec<PolicyResult>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Simulate settings that fail the bounded-cost condition.
    pub allow_divergent: bool,
}

pub fn solve_dp(cfg: &ExperimentConfig) -> Result<DpSummary, CliError> {
    let spec = cfg.system_unchecked()?;
    let n = spec.len();
    let section = cfg.dp.clone();
    let bounds = match section.as_ref().and_then(|d| d.a_max) {
        Some(a) => TruncatedBox::new(a, n)?,
        None => TruncatedBox::default_for(n)?,
    };
    let opts = DpOptions {
        memory_budget: section.as_ref().and_then(|d| d.memory_budget).unwrap_or(DEFAULT_MEMORY_BUDGET),
        ..DpOptions::default()
    };
    let sol = finite_horizon_dp(&spec, cfg.horizon, bounds, &AgeVector::ones(n), &opts)?;
    let cycle = if spec.all_reliable() { Some(extract_cycle_policy(&sol, &spec)?) } else { None };
    let switch_violations = match &cycle {
        Some(c) => Some(check_strong_switch(&StateActionSet::try_from(c)?).len()),
        None => None,
    };
    Ok(DpSummary {
        optimal_average_cost: sol.optimal_average_cost,
        horizon: sol.horizon,
        a_max: sol.bounds.a_max,
        initial_state: sol.initial_state,
        truncation_report: sol.truncation_report,
        warnings: sol.warnings,
        cycle,
        switch_violations,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultBundle, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.resolved();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let spec = if opts.allow_divergent { cfg.system_unchecked()? } else { cfg.system()? };
    let runs = cfg.runs();

    let dp = if cfg.dp_enabled() { Some(solve_dp(&cfg)?) } else { None };
    let mut policies = Vec::new();
    for p in &cfg.policies {
        let Some(policy) = p.build(&spec)? else { continue };
        let result = simulate(&spec, &policy, cfg.horizon, runs, cfg.seed)?;
        let cycle = if spec.all_reliable() && policy.is_deterministic() {
            detect_cycle(&spec, &policy, CYCLE_STEPS).ok()
        } else {
            None
        };
        policies.push(PolicyResult { policy: p.to_string(), result, cycle });
    }
    Ok(ResultBundle {
        setting: cfg.name.clone(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.to_toml(),
        },
        dp,
        policies,
    })
}

impl ResultBundle {
    /// Re-runs the experiment recorded in the provenance block.
    pub fn rerun(&self, allow_divergent: bool) -> Result<ResultBundle, CliError> {
        let cfg = ExperimentConfig::parse(&self.provenance.config)?;
        run_experiment(&cfg, &RunOptions { seed: Some(self.provenance.seed), allow_divergent })
    }

    pub fn row(&self, policy: &str) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.policy == policy)
    }

    /// One row per policy; the DP optimum is an exact expectation with zero
    /// standard error.
    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["setting", "policy", "mean_cost", "stderr", "runs", "horizon", "seed"])?;
        let cfg = ExperimentConfig::parse(&self.provenance.config)?;
        for p in &cfg.policies {
            if *p == PolicySpec::Dp {
                if let Some(dp) = &self.dp {
                    w.write_record([
                        self.setting.clone(),
                        "dp".into(),
                        dp.optimal_average_cost.to_string(),
                        "0".into(),
                        "1".into(),
                        dp.horizon.to_string(),
                        self.provenance.seed.to_string(),
                    ])?;
                }
                continue;
            }
            let Some(row) = self.row(&p.to_string()) else { continue };
            let r = &row.result;
            w.write_record([
                self.setting.clone(),
                row.policy.clone(),
                r.mean_cost.to_string(),
                r.stderr.to_string(),
                r.runs.to_string(),
                r.horizon.to_string(),
                r.seed.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    /// Writes `<setting>.csv` and `<setting>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.setting));
        let json = dir.join(format!("{}.json", self.setting));
        write_atomic(&csv, self.to_csv()?.as_bytes())?;
        write_atomic(&json, self.to_json().as_bytes())?;
        Ok((csv, json))
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
