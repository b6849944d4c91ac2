use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hiercast::pipeline::{
    cmd_evaluate, cmd_forecast, cmd_geometry_demo, cmd_pool_select, cmd_reconcile, cmd_simulate, format_geometry,
    PipelineConfig,
};
use hiercast::{Error, ErrorKind};

/// Hierarchical probabilistic demand forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "hiercast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Pipeline config (TOML); built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic panel (or the loaded one) as CSV.
    Simulate(Common),
    /// Rolling-window forecasts and metric tables.
    Forecast(Common),
    /// Score candidate pools and pick an open set.
    PoolSelect(Common),
    /// Reconcile base forecasts with every configured method.
    Reconcile(Common),
    /// Paired Wilcoxon / Hodges-Lehmann comparison report.
    Evaluate(Common),
    /// Reconcile the two-leaf worked example and check it.
    GeometryDemo,
    /// Print the default config.
    DefaultConfig,
}

fn load(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    let report = match cli.command {
        Command::Simulate(c) => cmd_simulate(&load(&c)?)?,
        Command::Forecast(c) => cmd_forecast(&load(&c)?)?,
        Command::PoolSelect(c) => cmd_pool_select(&load(&c)?)?,
        Command::Reconcile(c) => cmd_reconcile(&load(&c)?)?,
        Command::Evaluate(c) => cmd_evaluate(&load(&c)?)?,
        Command::GeometryDemo => {
            let lines = cmd_geometry_demo()?;
            print!("{}", format_geometry(&lines));
            return Ok(lines.iter().all(|l| l.pass));
        }
        Command::DefaultConfig => PipelineConfig::default().to_toml()?,
    };
    print!("{report}");
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Solver => 3,
            })
        }
    }
}
