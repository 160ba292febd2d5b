// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use aoi_cli::commands::{
    dp_report, index_csv, log_charges, render_tables, run_bundled, threshold_report, verify_indexability,
    verify_strong_switch, verify_theorem3, Verdict,
};
use aoi_cli::config::bundled;
use aoi_cli::{run_experiment, CliError, ExperimentConfig, RunOptions};
use aoi_core::CostFunction;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aoi", version, about = "Age-of-information scheduling: Whittle index, DP and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name of a bundled config, e.g. table1_A1.
    #[arg(long)]
    bundled: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        match (&self.config, &self.bundled) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)
            }
            (None, Some(name)) => bundled(name),
            (None, None) => unreachable!("clap requires one of the two"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write `<name>.csv` and `<name>.json`.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory.
        #[arg(long, env = "AOI_OUT_DIR", default_value = "results")]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulate even when an unreliable source has unbounded expected cost.
        #[arg(long)]
        allow_divergent: bool,
    },
    /// Whittle index table as CSV.
    Index {
        /// Cost record, e.g. "kind=power exponent=2".
        #[arg(long)]
        cost: CostFunction,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 20)]
        max_age: u64,
    },
    /// Optimal threshold of the single-source problem at one charge.
    Threshold {
        #[arg(long)]
        cost: CostFunction,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long)]
        charge: f64,
        /// Cross-check with relative value iteration.
        #[arg(long)]
        vi: bool,
    },
    /// Finite-horizon DP optimum of a config as JSON.
    Dp {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        a_max: Option<u64>,
        /// Memory budget in bytes.
        #[arg(long)]
        memory_budget: Option<u64>,
        /// Include the cycle followed by the optimal policy (reliable channels).
        #[arg(long)]
        cycle: bool,
    },
    /// Structural checks; exit code 2 on a violation.
    Verify {
        #[command(subcommand)]
        mode: VerifyMode,
    },
    /// Both comparison tables from the bundled configs.
    Tables {
        /// Also write every bundle here.
        #[arg(long, env = "AOI_OUT_DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyMode {
    /// Cycle JSON or a list of {state, action} entries.
    StrongSwitch {
        #[arg(long)]
        input: PathBuf,
    },
    /// Whittle cycle, best cycle and DP agree for two reliable sources.
    Theorem3 {
        #[arg(long)]
        f1: CostFunction,
        #[arg(long)]
        f2: CostFunction,
    },
    /// Thresholds over a log-spaced charge sweep.
    Indexability {
        #[arg(long)]
        cost: CostFunction,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 50)]
        charges: usize,
        #[arg(long, default_value_t = 0.01)]
        c_min: f64,
        #[arg(long, default_value_t = 1e4)]
        c_max: f64,
    },
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json(v: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("json values serialize")));
}

fn verdict(v: Verdict) -> i32 {
    print_json(&v.report);
    if v.ok {
        0
    } else {
        2
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { source, out, seed, allow_divergent } => {
            let cfg = source.load()?;
            let bundle = run_experiment(&cfg, &RunOptions { seed, allow_divergent })?;
            let (csv, json) = bundle.write(&out)?;
            if let Some(dp) = &bundle.dp {
                for w in &dp.warnings {
                    eprintln!("warning: {w}");
                }
            }
            emit(&bundle.to_csv()?);
            eprintln!("wrote {} and {}", csv.display(), json.display());
            Ok(0)
        }
        Command::Index { cost, p, max_age } => {
            emit(&index_csv(&cost, p, max_age)?);
            Ok(0)
        }
        Command::Threshold { cost, p, charge, vi } => {
            print_json(&threshold_report(&cost, p, charge, vi)?);
            Ok(0)
        }
        Command::Dp { source, horizon, a_max, memory_budget, cycle } => {
            let mut cfg = source.load()?;
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            if a_max.is_some() || memory_budget.is_some() {
                let mut d = cfg.dp.clone().unwrap_or(aoi_cli::config::DpConfig { enabled: true, a_max: None, memory_budget: None });
                d.a_max = a_max.or(d.a_max);
                d.memory_budget = memory_budget.or(d.memory_budget);
                cfg.dp = Some(d);
            }
            cfg.validate()?;
            print_json(&dp_report(&cfg, cycle)?);
            Ok(0)
        }
        Command::Verify { mode } => Ok(match mode {
            VerifyMode::StrongSwitch { input } => {
                let text = fs::read_to_string(&input)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", input.display())))?;
                verdict(verify_strong_switch(&text)?)
            }
            VerifyMode::Theorem3 { f1, f2 } => verdict(verify_theorem3(&f1, &f2)?),
            VerifyMode::Indexability { cost, p, charges, c_min, c_max } => {
                if !(c_min > 0.0 && c_max > c_min) || charges == 0 {
                    return Err(CliError::Usage("need 0 < c-min < c-max and at least one charge".into()));
                }
                verdict(verify_indexability(&cost, p, &log_charges(c_min, c_max, charges))?)
            }
        }),
        Command::Tables { out } => {
            let bundles = run_bundled()?;
            if let Some(dir) = out {
                for b in &bundles {
                    b.write(&dir)?;
                }
            }
            emit(&render_tables(&bundles));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
