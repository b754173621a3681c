use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcrowd::config::{ExperimentConfig, PolicyKind};
use fedcrowd::environment::{synthesize_dataset, write_dataset};
use fedcrowd::experiment::{metrics_from_dir, ota_check, run_scenario};
use fedcrowd::metrics::Estimate;
use fedcrowd::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedcrowd",
    version,
    about = "Federated multi-agent PPO for mobile crowdsensing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and validate the configured policies, writing result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Run a single policy instead of the configured list.
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Recompute the metric report from a run directory.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Solve tiny instances exactly and check the causal policies against them.
    OtaCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Write a synthetic task dataset CSV.
    GenDataset {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::parse(&std::fs::read_to_string(path)?)?)
}

fn fmt(e: &Estimate) -> String {
    format!("{:.4} [{:.4}, {:.4}]", e.mean, e.ci_low, e.ci_high)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            policy,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(p) = policy {
                cfg.policies = vec![p];
            }
            let res = run_scenario(&cfg, Some(&out))?;
            println!(
                "{:<10} {:>8} {:<32} {:<32}",
                "policy", "axis", "weighted completed", "collision ratio"
            );
            for p in &res.points {
                let axis = p
                    .axis_value
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<10} {:>8} {:<32} {:<32}",
                    p.policy.name(),
                    axis,
                    fmt(&p.report.weighted_completed),
                    fmt(&p.report.collision_ratio)
                );
            }
            println!("results written to {}", out.display());
            Ok(true)
        }
        Command::Metrics { input } => {
            let cfg = load(&input.join("config.txt"))?;
            for (group, r) in
                metrics_from_dir(&input, cfg.params.num_types, cfg.bootstrap_resamples)?
            {
                println!("{group}");
                println!("  realizations          {}", r.realizations);
                println!("  weighted completed    {}", fmt(&r.weighted_completed));
                println!("  collision ratio       {}", fmt(&r.collision_ratio));
                println!(
                    "  energy per completed  {}",
                    fmt(&r.energy_per_completed_task)
                );
                println!("  per-type CV           {:.4}", r.per_type_cv);
                let per_type: Vec<String> = r
                    .per_type_completions
                    .iter()
                    .map(|e| format!("{:.2}", e.mean))
                    .collect();
                println!("  per-type completions  {}", per_type.join(" "));
            }
            Ok(true)
        }
        Command::OtaCheck { config, instances } => {
            let cfg = load(&config)?;
            let rows = ota_check(&cfg, instances)?;
            println!(
                "{:>4} {:>10} {:>10} {:>10} {:>10}",
                "inst", "ota", "rtps", "motp", "ppo"
            );
            let mut ok = true;
            for r in &rows {
                let flag = if r.bound_holds() { "" } else { "  VIOLATION" };
                ok &= r.bound_holds();
                println!(
                    "{:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}{flag}",
                    r.instance, r.ota, r.rtps, r.motp, r.ppo
                );
            }
            Ok(ok)
        }
        Command::GenDataset { count, seed, out } => {
            let rows = synthesize_dataset(count, seed);
            write_dataset(&rows, std::fs::File::create(&out)?).map_err(Error::Csv)?;
            println!("wrote {} tasks to {}", rows.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
