//! `geolora` command-line runner.
//!
//! Exit status: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 4 a verification check failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geolora::harness::{
    run_checks, run_comparison, run_experiment, write_run, CheckReport, ExperimentConfig, Suite,
};
use geolora::Error;

#[derive(Parser, Debug)]
#[command(
    name = "geolora",
    version,
    about = "Rank-adaptive low-rank training experiments"
)]
struct Cli {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Add a `wall_time_ms` column and elapsed time to the outputs.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment; writes trajectory.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run several methods on one problem; writes comparison.csv plus one
    /// directory per run.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
    },
    /// Run a verification suite (`all` runs every suite).
    Check {
        #[arg(long)]
        suite: String,
    },
}

enum Failure {
    Error(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.timing |= cli.timing;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(cfg.label()));
            let out = run_experiment(&cfg)?;
            write_run(&out, &dir, cfg.timing)?;
            let s = &out.summary;
            println!(
                "{}: final loss {:e}, ranks {:?}, {} gradient evaluations -> {}",
                s.name,
                s.final_loss,
                s.final_ranks,
                s.gradient_evaluations,
                dir.display()
            );
        }
        Command::Compare { configs } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, cli))
                .collect::<Result<Vec<_>, _>>()?;
            let dir = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("out/comparison"));
            let cmp = run_comparison(&cfgs)?;
            cmp.write(&dir, cli.timing)?;
            for run in &cmp.runs {
                let s = &run.summary;
                println!(
                    "{:<24} final loss {:<12.4e} evaluations to {:e}: {}",
                    s.name,
                    s.final_loss,
                    s.loss_threshold,
                    s.evaluations_to_threshold
                        .map_or("not reached".into(), |e| e.to_string())
                );
            }
            println!("-> {}", dir.join("comparison.csv").display());
        }
        Command::Check { suite } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse()?]
            };
            let seed = cli.seed.unwrap_or(0);
            let mut reports: Vec<CheckReport> = Vec::new();
            for s in suites {
                let r = run_checks(s, seed)?;
                print!("{r}");
                reports.push(r);
            }
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir).map_err(Error::from)?;
                let json = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
                fs::write(dir.join("checks.json"), json + "\n").map_err(Error::from)?;
            }
            if !reports.iter().all(CheckReport::passed) {
                return Err(Failure::Checks);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(4),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
