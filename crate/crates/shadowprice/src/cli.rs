//! Command-line front end: parse market files, run the certification
//! pipeline, emit reports.
//!
//! Exit codes: 0 valid certificate, 1 parse error, 2 invalid certificate
//! (checks failed; report still emitted), 3 solver error.

use crate::cps::{certify, CertificationOptions};
use crate::oracle::{brute_force_value, GridSpec, OracleError};
use crate::report::{OracleBlock, Report};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_VALID: i32 = 0;
pub const EXIT_PARSE_ERROR: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER_ERROR: i32 = 3;

/// Tolerance for the oracle cross-check, floored at the documented grid
/// error bound.
const ORACLE_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "shadowprice",
    about = "Certify shadow prices for bid/ask markets on scenario trees"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a market description file, compute the optimal plan, extract
    /// the shadow price and verify the certificate.
    Certify(CertifyArgs),
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Market description files (TOML; see docs/market_format.md).
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Override the solver KKT tolerance.
    #[arg(long = "tol")]
    pub tolerance: Option<f64>,
    /// Cross-check the optimal value against the grid-search oracle
    /// (small instances only).
    #[arg(long)]
    pub oracle: bool,
    /// Seed for the randomized competitor self-test.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Certify independent files in parallel workers.
    #[arg(long)]
    pub batch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Structured,
}

pub fn run(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Certify(args) => run_certify(args),
    }
}

pub fn run_certify(args: &CertifyArgs) -> i32 {
    let outcomes: Vec<FileOutcome> = if args.batch && args.files.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = args
                .files
                .iter()
                .map(|path| scope.spawn(move || certify_file(path, args)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    } else {
        args.files.iter().map(|p| certify_file(p, args)).collect()
    };

    let mut worst = EXIT_VALID;
    for outcome in outcomes {
        if !outcome.stdout.is_empty() {
            print!("{}", outcome.stdout);
        }
        if !outcome.stderr.is_empty() {
            eprint!("{}", outcome.stderr);
        }
        worst = worst.max(outcome.code);
    }
    worst
}

struct FileOutcome {
    code: i32,
    stdout: String,
    stderr: String,
}

/// Runs the pipeline on one file. The report is emitted on exit codes 0 and
/// 2; parse and solver failures only produce a diagnostic.
fn certify_file(path: &Path, args: &CertifyArgs) -> FileOutcome {
    let started = Instant::now();
    let name = path.display();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            return FileOutcome {
                code: EXIT_PARSE_ERROR,
                stdout: String::new(),
                stderr: format!("{name}: cannot read file: {e}\n"),
            }
        }
    };
    let text = match String::from_utf8(bytes.clone()) {
        Ok(t) => t,
        Err(e) => {
            return FileOutcome {
                code: EXIT_PARSE_ERROR,
                stdout: String::new(),
                stderr: format!("{name}: file is not UTF-8: {e}\n"),
            }
        }
    };
    let market = match crate::marketfile::parse_market(&text) {
        Ok(m) => m,
        Err(e) => {
            return FileOutcome {
                code: EXIT_PARSE_ERROR,
                stdout: String::new(),
                stderr: format!("{name}: {e}\n"),
            }
        }
    };

    let mut options = CertificationOptions {
        seed: args.seed,
        ..Default::default()
    };
    if let Some(tol) = args.tolerance {
        options.solver = options.solver.with_tolerance(tol);
    }
    let mut certificate = match certify(&market, &options) {
        Ok(c) => c,
        Err(e) => {
            return FileOutcome {
                code: EXIT_SOLVER_ERROR,
                stdout: String::new(),
                stderr: format!("{name}: solver error: {e}\n"),
            }
        }
    };

    let mut stderr = String::new();
    let oracle_block = if args.oracle {
        match brute_force_value(&market, &GridSpec::default()) {
            Ok(result) => {
                let gap = (certificate.value_costs - result.value).abs();
                let tol = ORACLE_TOL.max(result.error_bound);
                if gap > tol {
                    certificate.valid = false;
                    certificate
                        .failures
                        .push(format!("oracle cross-check: gap {gap:.3e} exceeds {tol:.3e}"));
                }
                Some(OracleBlock {
                    value: result.value,
                    gap,
                    error_bound: result.error_bound,
                    evaluations: result.evaluations,
                })
            }
            Err(OracleError::InstanceTooLarge(reason)) => {
                stderr.push_str(&format!(
                    "{name}: oracle skipped: instance too large ({reason})\n"
                ));
                None
            }
        }
    } else {
        None
    };

    let report = Report::new(
        &bytes,
        &market,
        &certificate,
        oracle_block,
        options.solver.tolerance,
    );
    let mut stdout = match args.format {
        Format::Structured => {
            let mut s = report.render_structured();
            s.push('\n');
            s
        }
        Format::Text => report.render_text(),
    };
    if args.format == Format::Text {
        stdout.push_str(&format!(
            "wall time: {:.1} ms\n",
            started.elapsed().as_secs_f64() * 1e3
        ));
    }
    FileOutcome {
        code: if certificate.valid {
            EXIT_VALID
        } else {
            EXIT_INVALID
        },
        stdout,
        stderr,
    }
}
