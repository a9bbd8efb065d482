mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::FilterChoice;

#[derive(Parser)]
#[command(
    name = "backup-shield",
    version,
    about = "Safety filtering of mixed state-input constraints via backup control barrier functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (flat key = value with [section] headers); defaults used
    /// when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the control/integration step in seconds
    #[arg(long)]
    dt: Option<f64>,
    /// Override the filter selection: backup|hocbf|both
    #[arg(long)]
    filter: Option<FilterChoice>,
    /// Override the analysis grid, e.g. 301x301
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop simulation of the configured filter(s)
    Simulate(RunArgs),
    /// Invariant-set membership grids and nesting verification
    Sets(RunArgs),
    /// Run both filters from the same config and summarize side by side
    Compare(RunArgs),
    /// Embedded oracle suite (flow, sensitivity, qp, projection)
    Selftest,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected N1xN2, got '{s}'"))?;
    let n1 = a.parse().map_err(|e| format!("bad N1: {e}"))?;
    let n2 = b.parse().map_err(|e| format!("bad N2: {e}"))?;
    Ok((n1, n2))
}

#[cfg(feature = "parallel")]
fn init_thread_pool() {
    if let Ok(v) = std::env::var("BACKUP_SHIELD_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => eprintln!("ignoring BACKUP_SHIELD_THREADS='{v}' (want a positive integer)"),
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn init_thread_pool() {}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Simulate(a) => {
            let resolved = config::resolve(a.config.as_deref(), a.dt, a.filter, a.grid)?;
            commands::cmd_simulate(&resolved, &a.out)
        }
        Command::Sets(a) => {
            let resolved = config::resolve(a.config.as_deref(), a.dt, a.filter, a.grid)?;
            commands::cmd_sets(&resolved, &a.out)
        }
        Command::Compare(a) => {
            let resolved = config::resolve(a.config.as_deref(), a.dt, a.filter, a.grid)?;
            commands::cmd_compare(&resolved, &a.out)
        }
        Command::Selftest => commands::cmd_selftest(),
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
