use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmeta_cli::bounds::render_table;
use gmeta_cli::compare::{compare, render};
use gmeta_cli::{report_bounds, run, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "gmeta", version, about = "Generalized meta federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (overrides output.dir in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads for seeds, scenarios and clients.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed × scenario of a config (or a manifest.json).
    Run {
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Summarize metrics.csv files.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Accuracy for the first-round-reaching column.
        #[arg(long, default_value_t = 0.5)]
        target: f64,
    },
    /// Estimate constants and write bounds.json for a ν sweep.
    Bounds {
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn options(o: OutputArgs) -> RunOptions {
    RunOptions {
        out: o.out,
        workers: o.workers,
        force: o.force,
        progress: true,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output } => ExperimentConfig::load(&config)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| run(&cfg, &options(output)))
            .map(|o| println!("wrote {} rows to {}", o.rows.len(), o.dir.display())),
        Command::Compare { files, target } => compare(&files, target).map(|rows| print!("{}", render(&rows, target))),
        Command::Bounds { config, output } => ExperimentConfig::load(&config)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| report_bounds(&cfg, &options(output)))
            .map(|(path, b)| {
                print!("{}", render_table(&b));
                println!("wrote {}", path.display());
            }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
