use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod report;

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    Usage(String),
    /// Numerical or identification failure (exit 3).
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

fn is_usage(e: &ddsindy::Error) -> bool {
    use ddsindy::Error::*;
    match e {
        Load(_) | InvalidSplit(_) | InvalidRule(_) | InvalidAtom(_) | UnresolvedParameter(_) | UnknownBenchmark(_)
        | Config(_) | ModelFile(_) | Io(_) => true,
        Column { source, .. } => is_usage(source),
        _ => false,
    }
}

impl From<ddsindy::Error> for CliError {
    fn from(e: ddsindy::Error) -> Self {
        if is_usage(&e) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

/// Prefixes numerical failures with the pipeline stage that raised them.
pub fn at(stage: &'static str) -> impl Fn(ddsindy::Error) -> CliError {
    move |e| match CliError::from(e) {
        CliError::Numeric(m) => CliError::Numeric(format!("{stage} failed: {m}")),
        other => other,
    }
}

#[derive(Parser)]
#[command(name = "ddsindy", version, about = "Sparse identification of distributed-delay and renewal equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in benchmark (logistic_re, ricker_simple, ricker_advanced, daphnia).
    #[arg(long)]
    benchmark: Option<String>,
    /// Dataset CSV instead of a benchmark.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `$DDSINDY_OUT/<run>` (or `out/<run>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Benchmark parameter override, `key=value`; repeatable.
    #[arg(long = "set", value_parser = parse_pair)]
    set: Vec<(String, f64)>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training fraction.
    #[arg(long)]
    split: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct Fitting {
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of quadrature nodes.
    #[arg(long = "K")]
    nodes: Option<usize>,
    /// rectangles | trapezoid | clenshaw-curtis
    #[arg(long)]
    quadrature: Option<String>,
    /// Polynomial degree of the library.
    #[arg(long)]
    degree: Option<u32>,
    /// Run label used in reports.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Clone, Copy, ValueEnum, Default, PartialEq, Eq)]
pub enum Method {
    /// Quadrature-weighted distributed-delay library.
    #[default]
    Dd,
    /// Polynomial library of lagged states at the quadrature nodes.
    Bb,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset (CSV plus metadata).
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a sparse model with a fixed delay window.
    Identify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fitting: Fitting,
        #[arg(long, value_enum, default_value_t = Method::Dd)]
        method: Method,
    },
    /// Search unknown window bounds and atom parameters with a particle swarm.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fitting: Fitting,
    },
    /// Merge report CSVs into comparison tables, or run parameter sweeps.
    Report {
        /// Report CSVs written by `identify` or `optimize`.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        precision: usize,
        /// Benchmark to sweep over.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long = "sweep-K", value_delimiter = ',')]
        sweep_nodes: Vec<usize>,
        #[arg(long = "sweep-m", value_delimiter = ',')]
        sweep_samples: Vec<usize>,
        #[arg(long = "sweep-lambda", value_delimiter = ',')]
        sweep_lambda: Vec<f64>,
        /// Quadrature kinds to sweep; defaults to all three.
        #[arg(long = "sweep-quadrature", value_delimiter = ',')]
        sweep_kinds: Vec<String>,
    },
}

fn parse_pair(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn load(common: &Common, fitting: &Fitting) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        benchmark: common.benchmark.clone(),
        data: common.data.clone(),
        lambda: fitting.lambda,
        nodes: fitting.nodes,
        quadrature: fitting.quadrature.clone(),
        seed: common.seed,
        split: common.split,
        degree: fitting.degree,
        noise: common.noise,
        set: common.set.clone(),
    });
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir(explicit);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load(&common, &Fitting::default())?;
            let dir = out_dir(&cfg, common.out.as_deref())?;
            commands::simulate(&cfg, &dir)
        }
        Command::Identify { common, fitting, method } => {
            let cfg = load(&common, &fitting)?;
            let dir = out_dir(&cfg, common.out.as_deref())?;
            commands::identify(&cfg, &dir, method, fitting.name.as_deref())
        }
        Command::Optimize { common, fitting } => {
            let cfg = load(&common, &fitting)?;
            let dir = out_dir(&cfg, common.out.as_deref())?;
            commands::optimize(&cfg, &dir, fitting.name.as_deref())
        }
        Command::Report { inputs, out, precision, sweep, sweep_nodes, sweep_samples, sweep_lambda, sweep_kinds } => {
            let dir = out.unwrap_or_else(|| {
                std::env::var_os("DDSINDY_OUT").map_or(PathBuf::from("out"), PathBuf::from).join("report")
            });
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
            match sweep {
                Some(name) => {
                    let grid = commands::SweepGrid {
                        nodes: sweep_nodes,
                        samples: sweep_samples,
                        lambdas: sweep_lambda,
                        kinds: sweep_kinds,
                    };
                    commands::sweep(&name, &grid, &dir)
                }
                None => commands::report(&inputs, &dir, precision),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
