use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use condsmooth::error::{Error, Result};
use condsmooth::harness::commands::{cmd_filter, cmd_report, cmd_simulate, cmd_smooth, Overrides};
use condsmooth::harness::config::ExperimentConfig;
use condsmooth::smoother::SmootherMethod;

#[derive(Parser)]
#[command(name = "condsmooth", version, about = "Particle filtering and bridge-based fixed-lag smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Sine,
    NavierStokes,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Standard,
    Conditional,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Defaults to the sine experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum, default_value = "sine")]
    preset: Preset,
    /// Base seed; derives the truth, filter and smoother seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Vorticity grid side (32 or 64).
    #[arg(long)]
    grid: Option<usize>,
    /// Number of filter particles.
    #[arg(long)]
    particles: Option<usize>,
    /// Bridges per particle pair.
    #[arg(long)]
    bridges: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the hidden truth and its observations.
    Simulate(RunArgs),
    /// Run the particle filter on stored observations.
    Filter(RunArgs),
    /// Run the filter and a fixed-lag smoother on stored observations.
    Smooth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Merge the reports of several run directories.
    Report {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write summary.json and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a built-in config as JSON.
    Config {
        #[arg(value_enum)]
        preset: Preset,
    },
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => preset(args.preset),
    };
    Overrides {
        seed: args.seed,
        grid: args.grid,
        particles: args.particles,
        bridges: args.bridges,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Sine => ExperimentConfig::sine_default(),
        Preset::NavierStokes => ExperimentConfig::navier_stokes_default(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&resolve(&args)?, &args.out),
        Command::Filter(args) => {
            let report = cmd_filter(&resolve(&args)?, &args.out)?;
            if let Some(r) = report.filter.rmse {
                println!("filter rmse {r}");
            }
            Ok(())
        }
        Command::Smooth { run, method } => {
            let method = match method {
                Method::Standard => SmootherMethod::Standard,
                Method::Conditional => SmootherMethod::Conditional,
            };
            let report = cmd_smooth(&resolve(&run)?, method, &run.out)?;
            for s in &report.smoothers {
                if let Some(r) = s.trace.rmse {
                    println!("{} rmse {r}", s.method.name());
                }
            }
            Ok(())
        }
        Command::Report { runs, out } => {
            let summary = cmd_report(&runs, &out)?;
            println!("{} rows, {} problems", summary.rows.len(), summary.problems.len());
            Ok(())
        }
        Command::Config { preset: p } => {
            let text = serde_json::to_string_pretty(&preset(p)).map_err(|e| Error::Config(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::Config(_) => 2,
                e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
