//! `mixem`: simulate measurements, fit the noise model, run the grid
//! baseline, and merge reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixem_cli::commands::{self, CliError};
use mixem_cli::config::{self, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "mixem", about = "Joint posterior and mixed-noise parameter estimation")]
struct Cli {
    /// TOML experiment config; overrides the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in experiment preset.
    #[arg(long, global = true, value_parser = ["photomask", "linegrating", "desk"])]
    preset: Option<String>,
    /// Override the configured method.
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dump the fully resolved config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one measurement file per (N, seed) sweep cell.
    Simulate,
    /// Run the EM fit over all sweep cells and aggregate medians.
    Fit,
    /// Run the fixed-grid baseline over all sweep cells.
    Grid,
    /// Merge per-run reports in the output directory into a summary table.
    Report,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = if let Some(path) = &cli.config {
        config::load_config(path).map_err(CliError::Config)?
    } else if let Some(name) = &cli.preset {
        ExperimentConfig::preset(name)
            .ok_or_else(|| CliError::Config(format!("unknown preset {name}")))?
    } else {
        return Err(CliError::Config("pass --config <path> or --preset <name>".into()));
    };
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    if let Some(s) = cli.seed {
        cfg.seed_base = s;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.print_config {
        let cfg = resolve_config(cli)?;
        print!("{}", config::dump_config(&cfg));
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given (try --help)".into()));
    };
    match command {
        Command::Simulate => commands::cmd_simulate(&resolve_config(cli)?),
        Command::Fit => commands::cmd_fit(&resolve_config(cli)?),
        Command::Grid => commands::cmd_grid(&resolve_config(cli)?),
        Command::Report => {
            // `report` works from the directory alone; a config just supplies it.
            let dir = if let Some(out) = &cli.out {
                out.clone()
            } else {
                PathBuf::from(resolve_config(cli)?.out_dir)
            };
            commands::cmd_report(&dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
