use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plfo_core::datasets::Scenario;
use plfo_core::harness::{
    collect_aggregates, emit_comparison, evaluate_experiment, generate_data, run_audit, run_experiment,
    write_comparison, Algorithm, AuditConfig, ExperimentConfig, ExperimentResult,
};

#[derive(Parser)]
#[command(name = "plfo", version, about = "Offline learning from observations on tabular MDPs")]
#[command(after_help = "Set PLFO_THREADS to cap the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the scenario datasets for every seed.
    GenData(Overrides),
    /// Train, evaluate and aggregate one algorithm.
    Train(Overrides),
    /// Re-evaluate stored policies and rewrite the aggregate.
    Eval(Overrides),
    /// Robust-improvement audit over an (alpha, beta) grid.
    Audit(AuditArgs),
    /// Comparison table over every algorithm run on one scenario.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    scenario: String,
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn experiment(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(&read(&o.config)?)?;
    if let Some(seed) = o.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(algo) = &o.algo {
        cfg.algorithm = algo.clone();
    }
    if let Some(name) = &o.scenario {
        cfg.scenario = cfg.scenario.with_scenario(name.parse::<Scenario>()?);
    }
    cfg.algorithm.parse::<Algorithm>()?;
    Ok(cfg)
}

fn report(res: &ExperimentResult) {
    for s in &res.seeds {
        match &s.report {
            Ok(r) => println!(
                "seed {:>4}  J {:.4}  score {:7.2}  success {:.2}",
                s.seed, r.exact_return, r.normalized_score, r.success_rate
            ),
            Err(e) => println!("seed {:>4}  FAILED: {e}", s.seed),
        }
    }
    let a = &res.aggregate;
    println!(
        "{} {} {}: score {:.2} ± {:.2}, success {:.2} ± {:.2}{}",
        a.mdp,
        a.scenario,
        a.algorithm,
        a.score_mean,
        a.score_se,
        a.success_mean,
        a.success_se,
        if a.partial { " (partial)" } else { "" }
    );
    println!("wrote {}", res.aggregate_path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(o) => {
            for dir in generate_data(&experiment(&o)?)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Train(o) => report(&run_experiment(&experiment(&o)?)?),
        Command::Eval(o) => report(&evaluate_experiment(&experiment(&o)?)?),
        Command::Audit(a) => {
            let mut cfg = AuditConfig::from_json(&read(&a.config)?)?;
            if let Some(seed) = a.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = a.out {
                cfg.out_dir = out;
            }
            let (table, path) = run_audit(&cfg)?;
            println!(
                "{}/{} cells pass (epsilon {:.4}); wrote {}",
                table.rows.iter().filter(|r| r.pass).count(),
                table.rows.len(),
                table.epsilon,
                path.display()
            );
            if !table.all_pass() {
                bail!("robust improvement violated");
            }
        }
        Command::Compare(c) => {
            let rows = collect_aggregates(&c.out, &c.scenario)
                .with_context(|| format!("no results under {}", c.out.join(&c.scenario).display()))?;
            let cmp = emit_comparison(&rows)?;
            print!("{}", write_comparison(&c.out, &cmp)?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
