//! `parabolic` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a hypothesis, a convergence check or a
//! validation threshold fails, 2 on malformed input.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parabolic::nbody::Configuration;
use parabolic::ParabolicError;

use crate::config::InputError;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PARABOLIC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "parabolic", version, about = "Invariant manifolds of parabolic tori and parabolic three-body escapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the cone constants of a model and check the existence hypotheses.
    Constants(ModelArgs),
    /// Compute a parametrization to a given order and sample its invariance error.
    Approximate(ApproximateArgs),
    /// Refine a computed parametrization by fixed-point sweeps on a grid.
    Refine(RefineArgs),
    /// Compare true orbits with the inner dynamics of a computed parametrization.
    Validate(ValidateArgs),
    /// Constants, stable manifold and escape orbit of a three-body system.
    Nbody(NbodyArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model spec file (TOML or JSON).
    #[arg(long)]
    model: PathBuf,
    /// Fourier truncation `K`, overriding the spec.
    #[arg(long)]
    truncation: Option<usize>,
    /// Half-width of the cone around the first axis (ignored when `n = 1`).
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    /// Radius of the cone.
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    /// Sample points per chart axis.
    #[arg(long)]
    density: Option<usize>,
    /// Exit with status 1 when a required hypothesis fails.
    #[arg(long)]
    strict: bool,
    /// Directory for output artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ApproximateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Target order `j`.
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Allowed shortfall of the fitted residual slope below `j + N`.
    #[arg(long, default_value_t = 0.2)]
    slope_margin: f64,
}

#[derive(Args, Debug, Clone)]
struct RefineArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Number of sweeps.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// Largest radius of the refinement grid.
    #[arg(long, default_value_t = 3e-2)]
    grid_rho: f64,
    /// Radii of the refinement grid.
    #[arg(long, default_value_t = 5)]
    radii: usize,
    /// Angle nodes of the refinement grid.
    #[arg(long, default_value_t = 7)]
    angles: usize,
}

#[derive(Args, Debug, Clone)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Map iterates, or sample times for flows.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Largest accepted shadowing error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Collinear,
    Equilateral,
}

impl From<Branch> for Configuration {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Collinear => Configuration::Collinear,
            Branch::Equilateral => Configuration::Equilateral,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct NbodyArgs {
    /// System file (TOML or JSON) with masses, angular momentum and escape settings.
    #[arg(long)]
    system: PathBuf,
    /// Limiting configuration, overriding the system file.
    #[arg(long, value_enum)]
    branch: Option<Branch>,
    /// Order of the stable-manifold approximation.
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Relative tolerance of the escape integration.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Exit with status 1 when the escape leaves the cone instead of reporting it.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InputError>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<ParabolicError>() {
        Some(ParabolicError::InvalidInput(_) | ParabolicError::OutsideCone(_)) => 2,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| InputError(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Constants(a) => commands::constants(&a),
        Command::Approximate(a) => commands::approximate(&a),
        Command::Refine(a) => commands::refine(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Nbody(a) => commands::nbody(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
