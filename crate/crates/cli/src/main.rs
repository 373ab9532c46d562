use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rec_cli::checkpoint::{self, SaveSource};
use rec_cli::config::RunConfig;
use rec_cli::experiment::{run_all, write_outputs, RESULTS_FILE};
use rec_cli::report::run_report;

/// Lifelong learning experiments on dense networks.
#[derive(Parser)]
#[command(name = "rec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed of a key=value config.
    Run { config: PathBuf },
    /// Summarize the runs.jsonl in a results directory.
    Report { dir: PathBuf },
    /// Write or inspect RECNET01 checkpoints.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointCmd,
    },
}

#[derive(Subcommand)]
enum CheckpointCmd {
    /// Write a checkpoint, copied from another or freshly initialized.
    Save {
        path: PathBuf,
        /// Existing checkpoint to re-encode.
        #[arg(long, conflicts_with = "dims")]
        from: Option<PathBuf>,
        /// Layer sizes for a fresh network, e.g. 64,100,10.
        #[arg(long, value_delimiter = ',', required_unless_present = "from")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint's architecture, hash and sections.
    Load { path: PathBuf },
}

const PARSE_ERROR: u8 = 2;

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("REC_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("REC_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn cmd_run(path: &PathBuf) -> ExitCode {
    let cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(PARSE_ERROR);
        }
    };
    let pool = match threads() {
        Ok(n) => {
            let mut b = rayon::ThreadPoolBuilder::new();
            if let Some(n) = n {
                b = b.num_threads(n);
            }
            b.build().expect("thread pool")
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(PARSE_ERROR);
        }
    };
    let (jobs, arch) = match pool.install(|| run_all(&cfg)) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match write_outputs(&cfg, &jobs, &arch) {
        Ok(failures) if failures.is_empty() => {
            println!("{} runs written to {}", jobs.len(), cfg.output.join(RESULTS_FILE).display());
            ExitCode::SUCCESS
        }
        Ok(failures) => {
            for f in failures {
                eprintln!("error: {f}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: writing {}: {e}", cfg.output.display());
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Report { dir } => match run_report(&dir) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Checkpoint { action } => {
            let result = match action {
                CheckpointCmd::Save { path, from, dims, seed } => {
                    let source = match &from {
                        Some(p) => SaveSource::Copy(p),
                        None => SaveSource::Fresh { dims: &dims, seed },
                    };
                    checkpoint::save(&path, source).map(|c| format!("wrote {} ({} params)\n", path.display(), c.net.param_count()))
                }
                CheckpointCmd::Load { path } => checkpoint::describe(&path),
            };
            match result {
                Ok(s) => {
                    print!("{s}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
