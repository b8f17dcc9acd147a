//! `bifl`: run, verify and compare federated binary-network experiments.
//!
//! Exit status is 0 on success, 1 when a check fails and 2 for usage,
//! configuration or input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bifl_core::experiment::{self, render_comparison, RunConfig};
use bifl_core::mlpu::{default_sample_points, fit_curve, write_fit_cache, U_MAX};
use bifl_core::Error;

#[derive(Parser)]
#[command(
    name = "bifl",
    version,
    about = "Federated learning with binary neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run config and write its artifacts.
    Run { config: PathBuf },
    /// Tabulate final accuracy and communication of run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Recompute a run's summary from its per-seed files and check the ledger.
    Verify { dir: PathBuf },
    /// Fit the logarithmic estimator curve for `m` clients.
    FitCurve {
        #[arg(long)]
        m: usize,
        /// Also write the fit to this cache file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the estimator against a brute-force oracle and its contraction bound.
    AuditEstimator {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const CHECK_FAILED: u8 = 1;
const USAGE: u8 = 2;

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) => USAGE,
        _ => CHECK_FAILED,
    }
}

fn report_failures(failures: &[String]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in failures {
        eprintln!("FAIL {f}");
    }
    ExitCode::from(CHECK_FAILED)
}

fn execute(cmd: Command) -> bifl_core::Result<ExitCode> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let rep = experiment::run(&cfg)?;
            for n in &rep.notes {
                println!("{n}");
            }
            for f in &rep.files {
                println!("wrote {}", f.display());
            }
            Ok(report_failures(&rep.failures))
        }
        Command::Compare { dirs } => {
            print!("{}", render_comparison(&experiment::compare(&dirs)?));
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { dir } => {
            let rep = experiment::verify(&dir)?;
            for c in &rep.checks {
                println!("ok   {c}");
            }
            Ok(report_failures(&rep.failures))
        }
        Command::FitCurve { m, out } => {
            if m < 2 {
                return Err(Error::Config("--m must be >= 2".into()));
            }
            match fit_curve(m as f64, &default_sample_points(m as f64)) {
                Ok(f) => {
                    println!(
                        "M = {m}: a1 = {:.4}, a2 = {:.4}, a3 = {:.4}, max fit error = {:.4} over {} tallies",
                        f.a1, f.a2, f.a3, f.max_fit_error, f.samples
                    );
                    if let Some(path) = out {
                        write_fit_cache(&path, &[f])?;
                        println!("wrote {}", path.display());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => Ok(report_failures(&[format!("M = {m}: {e}")])),
            }
        }
        Command::AuditEstimator {
            m,
            samples,
            step,
            tolerance,
            seed,
        } => {
            if m < 2 || samples == 0 || !(step > 0.0 && step < U_MAX) {
                return Err(Error::Config(
                    "need --m >= 2, --samples >= 1 and a positive --step".into(),
                ));
            }
            let a = experiment::audit_estimator(m, step, samples, seed)?;
            println!(
                "oracle: {} tallies, max |û − argmax| = {:.3e}",
                a.oracle.cases, a.oracle.max_error
            );
            println!(
                "contraction: {} of {} samples with |μ̂/w̄| >= 1 ({} with û and w̄ of equal sign), max {:.4}",
                a.contraction.violations,
                a.contraction.samples,
                a.contraction.same_sign_violations,
                a.contraction.max_abs_ratio
            );
            match (&a.fit, &a.fit_failure) {
                (Some(f), _) => println!("fit: max error {:.4}", f.max_fit_error),
                (None, Some(e)) => println!("fit: {e}"),
                _ => {}
            }
            Ok(report_failures(&a.failures(tolerance, 0.05)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
