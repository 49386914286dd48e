use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kshare::checkpoint::load_checkpoint;
use kshare::config::load_config;
use kshare::experiment::run_experiment;

#[derive(Parser)]
#[command(name = "kshare", version, about = "Contrastive knowledge-sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Print a summary of a server checkpoint.
    Inspect { checkpoint: PathBuf },
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

/// Write to stdout, ignoring a closed pipe (e.g. output piped into `head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(CONFIG_ERROR)
            }
        },
        Command::Run { config } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(CONFIG_ERROR);
                }
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    let s = &report.log.summary;
                    println!(
                        "{} runner: {} rounds, global accuracy {:.4}",
                        s.runner, s.rounds_completed, s.global_accuracy
                    );
                    for f in &report.files {
                        println!("wrote {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUNTIME_ERROR)
                }
            }
        }
        Command::Inspect { checkpoint } => match load_checkpoint(&checkpoint) {
            Ok(s) => {
                let mut out = String::new();
                let _ = writeln!(out, "round {}  version {}", s.round, s.version);
                let _ = writeln!(
                    out,
                    "classifier: {} layers, {} parameters",
                    s.classifier.layers().len(),
                    s.classifier.param_count()
                );
                for (c, e) in s.table.entries().iter().enumerate() {
                    if e.initialized {
                        let winner = e.last_winner.map_or("-".to_string(), |w| w.to_string());
                        let _ = writeln!(out, "class {c}: trace {:.6}  winner {winner}", e.cov.trace());
                    } else {
                        let _ = writeln!(out, "class {c}: uninitialized");
                    }
                }
                let learned = s.gate_log.iter().filter(|g| g.learned).count();
                let _ = writeln!(
                    out,
                    "gate log: {} events, {} learned, {} rejected uploads",
                    s.gate_log.len(),
                    learned,
                    s.rejections.len()
                );
                emit(&out);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(RUNTIME_ERROR)
            }
        },
    }
}
