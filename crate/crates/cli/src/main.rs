use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedsim_core::data::dirichlet_partition;
use fedsim_core::gradcheck::{run_suite, TOLERANCE};
use fedsim_core::sim::{inspect_partition, partition_seed, run_ablation, run_experiment};
use fedsim_core::ExperimentConfig;

/// Federated learning simulator: FedAvg and prototype-calibrated training.
#[derive(Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write metrics and artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the nine component combinations and print the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Also write ablation.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the client partition; prints the plan as JSON, or class
    /// histograms with --inspect.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        inspect: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let result = run_experiment(&cfg, Some(&out))?;
            for s in &result.summary.seeds {
                println!("seed {}: final accuracy {:.4}", s.seed, s.final_acc);
            }
            println!("{}", result.summary.line());
            println!("artifacts in {}", out.display());
        }
        Command::Ablate { config, out } => {
            let cfg = load(&config)?;
            let table = run_ablation(&cfg, out.as_deref())?;
            print!("{}", table.render());
        }
        Command::Partition { config, inspect, seed } => {
            let cfg = load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            if inspect {
                for (client, hist) in inspect_partition(&cfg, seed)? {
                    let total: usize = hist.iter().sum();
                    let cells: Vec<String> = hist.iter().map(usize::to_string).collect();
                    println!("client {client:>3} [{total:>5}]: {}", cells.join(" "));
                }
            } else {
                let (train, _) = cfg.datasets()?;
                let plan = dirichlet_partition(&train, cfg.n_clients, cfg.beta, partition_seed(seed))?;
                println!("{}", plan.to_json()?);
            }
        }
        Command::Gradcheck { instances, seed } => {
            let report = run_suite(instances, seed)?;
            for l in &report.losses {
                println!(
                    "{:<18} {} instances  max rel err {:.3e}  {}",
                    l.name,
                    l.instances,
                    l.max_rel_err,
                    if l.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {TOLERANCE:e}, {:.2}s",
                report.elapsed.as_secs_f64()
            );
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
