// SPDX-License-Identifier: Apache-2.0

//! Bodies of the non-`run` subcommands, kept free of process concerns.

use std::fmt::Write as _;

use aoi_core::decoupled::{
    condition_slack, decoupled_value_iteration, default_truncation, indexability_sweep, optimal_threshold,
    threshold_average_cost, threshold_condition_holds, whittle_reliable, whittle_unreliable, SERIES_TOL, VI_MAX_ITERS,
    VI_TOL,
};
use aoi_core::structure::{certify_theorem3, check_strong_switch, StateActionSet, StructureError};
use aoi_core::{CostFunction, Cycle, DecoupledProblem, ThresholdPolicy};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{bundled, ExperimentConfig, BUNDLED};
use crate::experiment::{run_experiment, solve_dp, ResultBundle, RunOptions};
use crate::CliError;

/// A verification outcome: the JSON report and whether it certifies.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub ok: bool,
    pub report: Value,
}

/// `h,W_reliable,W_unreliable` for `h = 1..=max_age`.
pub fn index_csv(f: &CostFunction, p: f64, max_age: u64) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["h", "W_reliable", "W_unreliable"])?;
    for h in 1..=max_age {
        let r = whittle_reliable(f, h)?;
        let u = whittle_unreliable(f, p, h, SERIES_TOL)?;
        w.write_record([h.to_string(), r.to_string(), u.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn threshold_json(t: ThresholdPolicy) -> Value {
    match t {
        ThresholdPolicy::At(h) => json!(h),
        ThresholdPolicy::Never => json!("never"),
    }
}

/// Optimal threshold at one charge, optionally cross-checked by value iteration.
pub fn threshold_report(f: &CostFunction, p: f64, charge: f64, with_vi: bool) -> Result<Value, CliError> {
    let prob = DecoupledProblem::new(f.clone(), p, charge)?;
    let policy = optimal_threshold(&prob)?;
    let average_cost = threshold_average_cost(f, p, charge, policy)?;
    let mut out = json!({
        "cost": f.to_string(),
        "p": p,
        "charge": charge,
        "threshold": threshold_json(policy),
        "average_cost": average_cost,
    });
    if with_vi {
        let sol = decoupled_value_iteration(&prob, default_truncation(&prob)?, VI_TOL, VI_MAX_ITERS)?;
        out["value_iteration"] = json!({
            "threshold": threshold_json(sol.policy),
            "average_cost": sol.average_cost,
            "a_max": sol.a_max,
            "iterations": sol.iterations,
        });
    }
    Ok(out)
}

/// Optimal DP cost of a config, with its truncation report and cycle.
pub fn dp_report(cfg: &ExperimentConfig, with_cycle: bool) -> Result<Value, CliError> {
    let mut summary = solve_dp(cfg)?;
    if !with_cycle {
        summary.cycle = None;
    }
    Ok(serde_json::to_value(summary)?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SwitchInput {
    Cycle(Cycle),
    Pairs(StateActionSet),
    Wrapped { pairs: StateActionSet },
}

/// Strong-switch check of a cycle JSON (as written by `run`) or of a list
/// of `{state, action}` entries.
pub fn verify_strong_switch(json_text: &str) -> Result<Verdict, CliError> {
    let set = match serde_json::from_str::<SwitchInput>(json_text)? {
        SwitchInput::Cycle(c) => StateActionSet::try_from(&c)?,
        SwitchInput::Pairs(s) | SwitchInput::Wrapped { pairs: s } => s,
    };
    let violations = check_strong_switch(&set);
    Ok(Verdict {
        ok: violations.is_empty(),
        report: json!({ "states": set.pairs().len(), "violations": violations }),
    })
}

pub fn verify_theorem3(f1: &CostFunction, f2: &CostFunction) -> Result<Verdict, CliError> {
    match certify_theorem3(f1, f2) {
        Ok(cert) => Ok(Verdict { ok: true, report: json!({ "certified": true, "certificate": cert }) }),
        Err(StructureError::Certification { reason, witnesses }) => {
            let w: serde_json::Map<String, Value> = witnesses.into_iter().map(|(k, v)| (k, json!(v))).collect();
            Ok(Verdict { ok: false, report: json!({ "certified": false, "reason": reason, "witnesses": w }) })
        }
        Err(e) => Err(e.into()),
    }
}

/// `count` log-spaced charges on `[lo, hi]`.
pub fn log_charges(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

/// Thresholds must not decrease with the charge, and each finite one must
/// satisfy the optimality sandwich.
pub fn verify_indexability(f: &CostFunction, p: f64, charges: &[f64]) -> Result<Verdict, CliError> {
    let thresholds = indexability_sweep(f, p, charges)?;
    let mut problems = Vec::new();
    for (k, w) in thresholds.windows(2).enumerate() {
        if w[1] < w[0] {
            problems.push(json!({ "kind": "decreasing", "charge": charges[k + 1], "before": threshold_json(w[0]), "after": threshold_json(w[1]) }));
        }
    }
    for (&c, &t) in charges.iter().zip(&thresholds) {
        if let ThresholdPolicy::At(h) = t {
            let prob = DecoupledProblem::new(f.clone(), p, c)?;
            if !threshold_condition_holds(&prob, h, condition_slack(p))? {
                problems.push(json!({ "kind": "sandwich", "charge": c, "threshold": h }));
            }
        }
    }
    let sweep: Vec<Value> =
        charges.iter().zip(&thresholds).map(|(c, t)| json!({ "charge": c, "threshold": threshold_json(*t) })).collect();
    Ok(Verdict { ok: problems.is_empty(), report: json!({ "cost": f.to_string(), "p": p, "sweep": sweep, "problems": problems }) })
}

/// Runs every bundled config.
pub fn run_bundled() -> Result<Vec<ResultBundle>, CliError> {
    BUNDLED
        .par_iter()
        .map(|(name, _)| run_experiment(&bundled(name)?, &RunOptions::default()))
        .collect()
}

/// Both comparison tables (two sources, then three and four), two decimals.
pub fn render_tables(bundles: &[ResultBundle]) -> String {
    let mut out = String::new();
    let cell = |b: &ResultBundle| {
        let dp = b.dp.as_ref().map(|d| format!("{:.2}", d.optimal_average_cost)).unwrap_or_else(|| "-".into());
        let w = b.row("whittle").map(|r| format!("{:.2}", r.result.mean_cost)).unwrap_or_else(|| "-".into());
        (dp, w)
    };
    let setting = |b: &ResultBundle| b.setting.rsplit('_').next().unwrap_or(&b.setting).to_string();
    let reliability = |b: &ResultBundle| {
        let c = ExperimentConfig::parse(&b.provenance.config).ok();
        match c.map(|c| c.sources.iter().all(|s| s.p == 1.0)) {
            Some(true) => "reliable",
            _ => "unreliable",
        }
    };
    let _ = writeln!(out, "Two sources");
    let _ = writeln!(out, "{:<22} {:>12} {:>18}", "Setting", "Optimal Cost", "Whittle Index Cost");
    for b in bundles.iter().filter(|b| b.setting.starts_with("table1_")) {
        let (dp, w) = cell(b);
        let _ = writeln!(out, "{:<22} {:>12} {:>18}", format!("{} ({})", setting(b), reliability(b)), dp, w);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Three and four sources");
    let _ = writeln!(out, "{:<8} {:<22} {:>12} {:>18}", "Sources", "Setting", "Optimal Cost", "Whittle Index Cost");
    for b in bundles.iter().filter(|b| b.setting.starts_with("table2_")) {
        let (dp, w) = cell(b);
        let n = ExperimentConfig::parse(&b.provenance.config).map(|c| c.sources.len()).unwrap_or(0);
        let _ = writeln!(out, "{:<8} {:<22} {:>12} {:>18}", n, format!("{} ({})", setting(b), reliability(b)), dp, w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_csv_for_linear_cost() {
        let f = CostFunction::linear(1.0).unwrap();
        let csv = index_csv(&f, 0.5, 3).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("h,W_reliable,W_unreliable"));
        for (line, want) in lines.zip([(1.0, 1.0, 1.0), (2.0, 3.0, 2.5), (3.0, 6.0, 4.5)]) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!((v[0], v[1]), (want.0, want.1));
            assert!((v[2] - want.2).abs() < 1e-9 * want.2, "{line}");
        }
    }

    #[test]
    fn threshold_for_linear_cost() {
        let f = CostFunction::linear(1.0).unwrap();
        let r = threshold_report(&f, 1.0, 5.0, true).unwrap();
        assert_eq!(r["threshold"], json!(3));
        assert_eq!(r["value_iteration"]["threshold"], json!(3));
    }

    #[test]
    fn strong_switch_inputs() {
        let bad = r#"[{"state":[1,4],"action":1},{"state":[2,3],"action":2}]"#;
        let v = verify_strong_switch(bad).unwrap();
        assert!(!v.ok);
        assert_eq!(v.report["violations"].as_array().unwrap().len(), 1);
        assert_eq!(v.report["violations"][0]["observed"], json!(2));
        let good = r#"{"states":[[1,2],[2,1]],"actions":[2,1],"average_cost":3.0,"transient":1}"#;
        assert!(verify_strong_switch(good).unwrap().ok);
        assert!(verify_strong_switch(r#"[{"state":[1,4],"action":0}]"#).is_err());
    }

    #[test]
    fn theorem3_and_indexability_verdicts() {
        let lin = CostFunction::linear(1.0).unwrap();
        assert!(verify_theorem3(&lin, &lin).unwrap().ok);
        let f = CostFunction::power(0.5, 3.0).unwrap();
        let v = verify_indexability(&f, 0.55, &log_charges(0.01, 1e4, 30)).unwrap();
        assert!(v.ok, "{}", v.report);
    }

    #[test]
    fn log_charges_span_the_range() {
        let c = log_charges(0.01, 100.0, 5);
        assert_eq!(c.len(), 5);
        assert!((c[0] - 0.01).abs() < 1e-15 && (c[4] - 100.0).abs() < 1e-9);
        assert!((c[2] - 1.0).abs() < 1e-12);
    }
}
