use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use shadowlab_cli::{list_pipelines, list_scenarios, run_file, RunOverrides};

/// Shadowing and hyperbolicity experiments on built-in flows.
///
/// Exit codes: 0 success, 2 analysis-negative verdict, 1 error.
#[derive(Debug, Parser)]
#[command(name = "shadowlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `[run] out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random seed (overrides `[run] seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides `[run] threads`).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        threads: Option<u64>,
    },
    /// List built-in scenarios or pipelines.
    List { what: Listing },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Listing {
    Scenarios,
    Pipelines,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List { what } => {
            let lines = match what {
                Listing::Scenarios => list_scenarios(),
                Listing::Pipelines => list_pipelines(),
            };
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let overrides = RunOverrides {
                out,
                seed,
                threads: threads.map(|t| t as usize),
            };
            match run_file(&config, &overrides) {
                Ok(s) => {
                    println!("{}: {}", s.pipeline, s.summary);
                    println!("wrote {}", s.out_dir.display());
                    ExitCode::from(s.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
