//! Thin command-line wrapper over the `xtkd` library.
//!
//! Exit codes: `0` success, `1` configuration error, `2` run failure,
//! `3` assertion failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xtkd::harness::{
    bound_audit, grad_audit, load_config, run_experiment, run_preset, ExperimentOptions,
};
use xtkd::{Error, Result};

#[derive(Parser)]
#[command(name = "xtkd", disable_version_flag = true)]
/// Desk-scale laboratory for cross-task knowledge distillation.
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every configuration in an experiment file.
    Run {
        /// Experiment file (`key = value` lines under `[section]` headers).
        config: PathBuf,
        /// Output directory (overrides `XTKD_OUT` and the config file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the run grid.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Suppress per-run progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Run a named preset experiment and check its built-in assertions.
    Preset {
        /// One of: table1-grid, fig-spectra, teacher-free-sweep, linear-map,
        /// bound-audit.
        name: String,
        /// Comma-separated seeds (default 0,1,2,3,4).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads for the run grid.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory (overrides `XTKD_OUT`; default `xtkd-out/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-run progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Verify the decoupled distillation bound on random instances.
    BoundAudit {
        /// Number of random instances.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Active-set tolerance of the bound.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional path for the per-instance CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and loss gradient.
    GradAudit {
        /// Optional path for the per-case CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

/// Exit code for a hard error, per the contract above.
fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => 1,
        Error::AssertionFailure(_) => 3,
        _ => 2,
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os("XTKD_OUT").map(PathBuf::from)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            out,
            jobs,
            quiet,
        } => {
            let experiment = load_config(&config).map_err(|e| match e {
                // A missing or unreadable file is a configuration problem.
                Error::Io(io) => Error::Config {
                    key: config.display().to_string(),
                    message: io.to_string(),
                },
                other => other,
            })?;
            let out_dir = out
                .or_else(env_out)
                .or_else(|| experiment.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("xtkd-out"));
            let outcome = run_experiment(
                &experiment.runs,
                &experiment.seeds,
                &ExperimentOptions {
                    out_dir,
                    jobs,
                    quiet,
                },
            )?;
            println!(
                "completed {} runs; summary at {}",
                outcome.results.len(),
                outcome.summary_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Preset {
            name,
            seeds,
            jobs,
            out,
            quiet,
        } => {
            let out_dir = out.or_else(|| env_out().map(|base| base.join(&name)));
            let outcome = run_preset(&name, seeds.as_deref(), jobs, out_dir.as_deref(), quiet)?;
            print!("{}", outcome.assertions_text());
            println!("artifacts: {}", outcome.out_dir.display());
            if outcome.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::BoundAudit { n, tol, seed, out } => {
            let report = bound_audit(n, tol, seed)?;
            if let Some(path) = out {
                report.to_table()?.write(&path)?;
            }
            println!(
                "{} instances: min slack {:e}, max slack {:e}, violations {}",
                report.n, report.min_slack, report.max_slack, report.violations
            );
            println!(
                "matched-features slack {:e}, zero-projector slack {:e}",
                report.same_features.slack, report.zero_projector.slack
            );
            if report.passed {
                println!("PASS bound audit");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL bound audit");
                Ok(ExitCode::from(3))
            }
        }
        Command::GradAudit { out } => {
            let report = grad_audit()?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv())?;
            }
            for item in &report.items {
                println!(
                    "{} {} {}: max_rel_err {:e} (tol {:e}, {} entries over {} seeds)",
                    if item.passed { "PASS" } else { "FAIL" },
                    item.kind,
                    item.name,
                    item.max_rel_err,
                    item.tol,
                    item.checked,
                    item.seeds
                );
            }
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::Version => {
            println!("xtkd {}", env!("CARGO_PKG_VERSION"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
