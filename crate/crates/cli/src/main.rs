use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ebmbd_core::analysis::{
    default_lemma_scenarios, default_theorem_scenarios, parse_scenarios, Scenario,
};
use ebmbd_core::experiment::{
    self, liveliness_file_name, summary_table, Algorithm, RunConfig, Summary,
};
use ebmbd_core::problem::Difficulty;
use ebmbd_core::{Error, Result};

/// Emerging-barrier model-based diffusion experiments.
#[derive(Parser)]
#[command(name = "ebmbd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm over a batch of seeds.
    Run(RunArgs),
    /// Run several algorithms on the same world and tabulate them.
    Compare(CompareArgs),
    /// Run a batch per barrier exponent and write liveliness traces.
    SweepKappa(SweepArgs),
    /// Monte Carlo check of the liveliness bounds.
    ValidateBounds(BoundsArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canonical world (ignored when the config names a world file).
    #[arg(long)]
    preset: Option<Difficulty>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    algo: Option<Algorithm>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Algorithms to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "mbd,ebmbd,projected-mbd,dpcc-mbd")]
    algo: Vec<Algorithm>,
    /// Extra configs compared as they are (each keeps its own algorithm).
    #[arg(long = "with")]
    with: Vec<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8,16")]
    kappas: Vec<f64>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Scenario table; defaults to generated fixed-iterate and boundary-layer scenarios.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    lemma: usize,
    #[arg(long, default_value_t = 20)]
    theorem: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Common {
    fn config(&self, algo: Option<Algorithm>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(Difficulty::Hard),
        };
        if let Some(preset) = self.preset {
            if cfg.world.is_none() {
                cfg.preset = Some(preset);
            }
        }
        if let Some(algo) = algo {
            cfg.algorithm = algo;
        }
        if let Some(seeds) = self.seeds {
            cfg.seeds = seeds;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summaries(rows: &[Summary]) {
    print!("{}", summary_table(rows));
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.common.config(args.algo)?;
    let batch = experiment::run(&cfg, args.common.workers)?;
    print_summaries(std::slice::from_ref(&batch.summary));
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let base = args.common.config(None)?;
    let mut cfgs: Vec<RunConfig> = args
        .algo
        .iter()
        .map(|&a| RunConfig {
            algorithm: a,
            ..base.clone()
        })
        .collect();
    for path in &args.with {
        cfgs.push(RunConfig::load(path)?);
    }
    let outputs = experiment::compare(&cfgs, &base.out, args.common.workers)?;
    let rows: Vec<Summary> = outputs.into_iter().map(|o| o.summary).collect();
    print_summaries(&rows);
    if let (Some(proj), Some(eb)) = (
        rows.iter().find(|r| r.algorithm == Algorithm::ProjectedMbd),
        rows.iter().find(|r| r.algorithm == Algorithm::Ebmbd),
    ) {
        println!(
            "runtime ratio projected-mbd / ebmbd: {:.1}",
            proj.mean_wall_time_s / eb.mean_wall_time_s
        );
    }
    println!("wrote {}", base.out.join("summary.csv").display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.common.config(args.algo.or(Some(Algorithm::Ebmbd)))?;
    let outputs = experiment::sweep_kappa(&cfg, &args.kappas, args.common.workers)?;
    for (kappa, out) in args.kappas.iter().zip(&outputs) {
        let final_violation = out
            .records
            .iter()
            .filter(|r| r.stats.last().is_some_and(|s| s.alive_fraction == 0.0))
            .count();
        println!(
            "kappa {kappa}: feasible {:.0}%, {} of {} seeds end fully violating -> {}",
            out.summary.feasibility_pct,
            final_violation,
            out.records.len(),
            cfg.out.join(liveliness_file_name(*kappa)).display()
        );
    }
    Ok(())
}

fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_scenarios(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn validate_bounds(args: BoundsArgs) -> Result<bool> {
    let scenarios = match &args.scenarios {
        Some(path) => load_scenarios(path)?,
        None => {
            let mut s = default_lemma_scenarios(args.lemma, args.seed);
            s.extend(default_theorem_scenarios(args.theorem, args.lemma, args.seed));
            s
        }
    };
    let checks =
        experiment::validate_bounds(&scenarios, args.draws, args.seed, &args.out, args.workers)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
    for c in &failed {
        println!(
            "FAIL {} #{}: estimate {:.5} (stderr {:.2e}) below bound {:.5}",
            c.kind, c.id, c.estimate, c.stderr, c.bound
        );
    }
    println!(
        "{} of {} scenarios pass; wrote {}",
        checks.len() - failed.len(),
        checks.len(),
        args.out.join("bounds.csv").display()
    );
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::SweepKappa(a) => sweep(a).map(|_| true),
        Command::ValidateBounds(a) => validate_bounds(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
