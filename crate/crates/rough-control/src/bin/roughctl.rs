//! Command-line entry point.
//!
//! ```text
//! roughctl <SUBCOMMAND> [--config FILE] [--seed N] [--paths N] [--grid N]
//!          [--out DIR] [--workers K] [--fixture ID] [--penalty KIND]
//! ```
//!
//! Subcommands: `lqc-verify`, `bound`, `hjb`, `pmp`, `wong-zakai`,
//! `sample-path`. Flags override fields of the JSON config. Exit codes:
//! 0 pass, 1 check failure, 2 configuration error, 3 numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rough_control::harness::{error_exit_code, run_subcommand, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "roughctl",
    version,
    about = "Pathwise stochastic optimal control via rough paths: duality bounds, HJB and Pontryagin diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<String>,
    /// Master seed for the driver sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Number of time-grid intervals.
    #[arg(long)]
    grid: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Worker threads (results are identical for any count).
    #[arg(long)]
    workers: Option<usize>,
    /// Fixture id: lqc-additive or lqc-multiplicative.
    #[arg(long)]
    fixture: Option<String>,
    /// Penalty kind for the upper bound: rogers-value, davis-burstein, zero.
    #[arg(long)]
    penalty: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle-checked duality run on a linear-quadratic fixture.
    LqcVerify(CommonArgs),
    /// Lower/upper bound estimation without pass/fail checks.
    Bound(CommonArgs),
    /// Rough-HJB convergence ladder along piecewise-linear approximations.
    Hjb(CommonArgs),
    /// Hamiltonian-residual and spike-variation diagnostics.
    Pmp(CommonArgs),
    /// Wong–Zakai convergence ladder for a scalar test equation.
    WongZakai(CommonArgs),
    /// Sample one Brownian driver and write it in columnar form.
    SamplePath(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::LqcVerify(_) => "lqc-verify",
            Command::Bound(_) => "bound",
            Command::Hjb(_) => "hjb",
            Command::Pmp(_) => "pmp",
            Command::WongZakai(_) => "wong-zakai",
            Command::SamplePath(_) => "sample-path",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::LqcVerify(a)
            | Command::Bound(a)
            | Command::Hjb(a)
            | Command::Pmp(a)
            | Command::WongZakai(a)
            | Command::SamplePath(a) => a,
        }
    }
}

fn build_config(args: &CommonArgs) -> Result<ExperimentConfig, rough_control::Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            // defer validation until after flag overrides
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| rough_control::Error::Config(format!("bad config: {e}")))?
        }
        None => ExperimentConfig::additive_defaults(),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = Some(seed);
    }
    if let Some(paths) = args.paths {
        cfg.n_paths = paths;
    }
    if let Some(grid) = args.grid {
        cfg.grid_n = grid;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(fixture) = &args.fixture {
        cfg.fixture = fixture.clone();
    }
    if let Some(penalty) = &args.penalty {
        cfg.penalty.kind = penalty.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(cli.command.args()) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("configuration error: {err}");
            return ExitCode::from(2);
        }
    };
    match run_subcommand(cli.command.name(), &cfg) {
        Ok(record) => {
            for c in &record.checks {
                println!(
                    "{} {} — {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if let Some(report) = &record.report {
                if let Some(l) = &report.lower {
                    println!("lower bound: {} (se {}, n {})", l.mean, l.std_err, l.n_paths);
                }
                if let Some(u) = &report.upper {
                    println!("upper bound: {} (se {}, n {})", u.mean, u.std_err, u.n_paths);
                }
                if let (Some(gap), Some(v)) = (report.gap, record.oracle_value) {
                    println!("gap: {gap} (oracle value {v})");
                }
            }
            println!(
                "wrote {} file(s) to {} in {:.2}s",
                record.outputs.len(),
                record.config.out_dir,
                record.runtime_secs
            );
            ExitCode::from(record.exit_code() as u8)
        }
        Err(err) => {
            eprintln!("run failed: {err}");
            ExitCode::from(error_exit_code(&err) as u8)
        }
    }
}
