use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbio::config::{apply_env_overrides, parse_config};
use fedbio::runner::{emit_summary, run_experiment, summarize_dir, SUMMARY_FILE};
use fedbio::CliError;

/// Federated bilevel optimization experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write logs plus summary.csv.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config and FEDBIO_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Rebuild summary.csv from the result files in a directory.
    Summarize { dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let mut cfg = parse_config(&config)?;
            apply_env_overrides(&mut cfg);
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let report = run_experiment(&cfg)?;
            for f in &report.failures {
                eprintln!("warning: {} seed {} failed: {}", f.method, f.seed, f.error);
            }
            println!(
                "{} runs succeeded, {} failed; summary in {}",
                report.results.len(),
                report.failures.len(),
                cfg.output_dir.join(SUMMARY_FILE).display()
            );
            if report.results.is_empty() {
                return Err(CliError::Runtime("every run failed".into()));
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            println!(
                "{}: ok ({} problem, {}, {} seed(s))",
                config.display(),
                cfg.problem.name(),
                cfg.run.algorithm.name(),
                cfg.seeds.len()
            );
            Ok(())
        }
        Command::Summarize { dir } => {
            let table = summarize_dir(&dir)?;
            let path = dir.join(SUMMARY_FILE);
            emit_summary(&table, &path)?;
            for r in &table.rows {
                println!(
                    "{:<24} {:<8} {:<22} {:>12.6e} ± {:<12.6e} n={}",
                    r.method, r.distribution, r.metric, r.mean, r.std, r.n_seeds
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedbio: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
