//! `gem`: run, validate and list experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gem_core::env::EnvId;
use gem_core::harness::{self, load_config, ConfigError, ExperimentKind, Overrides, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "gem", version, about = "Episodic-memory reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write CSVs, an aggregate and a verdict.
    Run {
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Budget in steps, episodes or samples, depending on the kind.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Override any key, e.g. `--set hyper.tau=0.5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// List built-in environments.
    ListEnvs,
}

fn read_config(path: &Path, overrides: &Overrides) -> Result<harness::ExperimentConfig, String> {
    let source = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_config(&source, overrides).map_err(|e| match e {
        ConfigError::Parse(_) | ConfigError::Invalid(_) => format!("{}:\n{e}", path.display()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListEnvs => {
            for id in EnvId::ALL {
                println!("{:<12} {}", id.as_str(), id.describe());
            }
            println!();
            println!("experiment kinds: {}", ExperimentKind::ALL.map(|k| k.as_str()).join(", "));
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match read_config(&config, &Overrides::default()) {
            Ok(c) => {
                let n = c.seeds.len();
                println!("{}: ok ({}, {n} seed{})", config.display(), c.kind, if n == 1 { "" } else { "s" });
                ExitCode::SUCCESS
            }
            Err(msg) => {
                eprintln!("{msg}");
                ExitCode::from(EXIT_CONFIG as u8)
            }
        },
        Command::Run {
            config,
            seed,
            steps,
            env,
            out,
            set,
        } => {
            let overrides = Overrides {
                seed,
                budget: steps,
                env,
                out,
                set,
            };
            let c = match read_config(&config, &overrides) {
                Ok(c) => c,
                Err(msg) => {
                    eprintln!("{msg}");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            match harness::run(&c) {
                Ok(summary) => {
                    for line in &summary.verdict.lines {
                        println!("{line}");
                    }
                    println!("outputs in {}", summary.out_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
