//! `lnnet`: generate data, analyze separability, and synthesize and verify
//! LN-Nets from the command line.
//!
//! Reports are JSON (or CSV where tabular) written to `--output` or stdout;
//! one-line summaries go to stderr. Exit codes: 0 success, 1 domain or
//! validation error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lnnet::Tolerances;

#[derive(Parser, Debug)]
#[command(name = "lnnet", version, about = "Layer normalization as a source of nonlinearity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled dataset as CSV.
    Gen(GenArgs),
    /// SSR, LSSR and the derivative of the SSR along the LSSR direction.
    Ssr(SsrArgs),
    /// Build a one-LN-layer map that pushes SSR below LSSR.
    BreakLssr(BreakArgs),
    /// Synthesize an LN-Net that classifies every point of a dataset.
    Synth(SynthArgs),
    /// Evaluate a synthesized net on a dataset.
    Verify(VerifyArgs),
    /// Sweep the Hessian nonlinearity measure over group counts.
    Hessian(HessianArgs),
    /// Check that random points are shattered by shallow synthesized nets.
    Shatter(ShatterArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// The four XOR points.
    Xor,
    /// Gaussian samples from one row of the reference table (--row a..d).
    Table,
    /// Standard normal points with uniformly random labels.
    Random,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Table row: a, b, c or d.
    #[arg(long, required_if_eq("kind", "table"))]
    pub row: Option<String>,
    /// Number of points (per class for table rows).
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SsrArgs {
    /// Two-class dataset CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct BreakArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the LN map as a network document.
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Line-search halvings per sign.
    #[arg(long, default_value_t = 60)]
    pub budget: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Binary synthesis for two labels, multi-class otherwise.
    Auto,
    Binary,
    Multiclass,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Model document: the network plus its prototype readout.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer synthesis trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Model document written by `synth`.
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct HessianArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Comma-separated group counts; each must divide --dim.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Also compare against finite differences on this many samples.
    #[arg(long, default_value_t = 0)]
    pub fd_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct ShatterArgs {
    #[arg(long, default_value_t = 6)]
    pub points: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// LN-layer budget per labeling; defaults to points - 2.
    #[arg(long)]
    pub max_layers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Why a command failed, and which exit code that maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl From<lnnet::Error> for Failure {
    fn from(e: lnnet::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

fn tolerances() -> Result<Tolerances, Failure> {
    let mut tol = Tolerances::default();
    if let Ok(raw) = std::env::var("LNNET_EPS_EQ") {
        tol.eps_eq = raw
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Failure::Usage(format!("LNNET_EPS_EQ must be a non-negative number, got {raw:?}")))?;
    }
    Ok(tol)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let tol = tolerances()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&a, &tol),
        Command::Ssr(a) => commands::ssr(&a, &tol),
        Command::BreakLssr(a) => commands::break_lssr(&a, &tol),
        Command::Synth(a) => commands::synth(&a, &tol),
        Command::Verify(a) => commands::verify(&a, &tol),
        Command::Hessian(a) => commands::hessian(&a),
        Command::Shatter(a) => commands::shatter(&a, &tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn group_lists_split_on_commas() {
        let cli = Cli::try_parse_from(["lnnet", "hessian", "--groups", "1,2,8"]).unwrap();
        let Command::Hessian(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.groups, vec![1, 2, 8]);
        assert_eq!(a.dim, 16);
    }
}
