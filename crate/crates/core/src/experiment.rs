//! Experiment plumbing: run configs, seed batches, per-run records and the
//! CSV/JSON files the plotting scripts consume.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, BoundCheck, Scenario};
use crate::diffusion::{self, IterationStats, Mode, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::problem::{
    Difficulty, ObstacleProblem, ObstacleWorld2D, Problem, Vec2, DEFAULT_TEMPERATURE,
};
use crate::projection::{self, ProjectionConfig};
use crate::schedule::{BarrierSchedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Mbd,
    Ebmbd,
    ProjectedMbd,
    DpccMbd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Mbd,
        Algorithm::Ebmbd,
        Algorithm::ProjectedMbd,
        Algorithm::DpccMbd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mbd => "mbd",
            Algorithm::Ebmbd => "ebmbd",
            Algorithm::ProjectedMbd => "projected-mbd",
            Algorithm::DpccMbd => "dpcc-mbd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm `{s}` (expected mbd, ebmbd, projected-mbd or dpcc-mbd)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(alias = "S")]
    pub steps: usize,
    pub kappa: f64,
    /// Largest barrier offset; defaults to the world's largest obstacle radius.
    pub c_max: Option<f64>,
    pub mu: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 100,
            kappa: 1.0,
            c_max: None,
            mu: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    #[serde(alias = "N")]
    pub samples: usize,
    /// First seed of the batch; run `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            samples: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<Difficulty>,
    /// World file; relative paths resolve against the config file's directory.
    pub world: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub schedule: ScheduleParams,
    pub sampler: SamplerParams,
    pub seeds: usize,
    pub out: PathBuf,
    pub horizon: Option<usize>,
    pub temperature: f64,
    pub projection: ProjectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            world: None,
            algorithm: Algorithm::Ebmbd,
            schedule: ScheduleParams::default(),
            sampler: SamplerParams::default(),
            seeds: 1,
            out: PathBuf::from("out"),
            horizon: None,
            temperature: DEFAULT_TEMPERATURE,
            projection: ProjectionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(difficulty: Difficulty) -> Self {
        RunConfig {
            preset: Some(difficulty),
            ..RunConfig::default()
        }
    }

    /// Parses a JSON config. Errors carry the line they refer to.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "line {}, column {}: {}",
                e.line(),
                e.column(),
                strip_position(&e.to_string())
            ))
        })?;
        cfg.check().map_err(|(key, msg)| match key_line(text, key) {
            Some(line) => Error::Config(format!("line {line}: {msg}")),
            None => Error::Config(msg),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), config_msg(&e))))?;
        if let (Some(world), Some(dir)) = (cfg.world.as_mut(), path.parent()) {
            if world.is_relative() {
                *world = dir.join(&*world);
            }
        }
        if let Some(world) = &cfg.world {
            if !world.is_file() {
                let line = key_line(&text, "world").unwrap_or(1);
                return Err(Error::Config(format!(
                    "{}: line {line}: world file {} does not exist",
                    path.display(),
                    world.display()
                )));
            }
        }
        Ok(cfg)
    }

    /// Range checks; returns the offending key with the message.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let s = &self.schedule;
        if self.preset.is_some() && self.world.is_some() {
            return Err(("world", "give either `preset` or `world`, not both".into()));
        }
        if s.steps < 2 {
            return Err(("steps", format!("steps must be >= 2, got {}", s.steps)));
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err((
                "beta_start",
                format!(
                    "need 0 < beta_start <= beta_end < 1, got {} and {}",
                    s.beta_start, s.beta_end
                ),
            ));
        }
        if !(s.kappa > 0.0 && s.kappa.is_finite()) {
            return Err(("kappa", format!("kappa must be positive, got {}", s.kappa)));
        }
        if let Some(c) = s.c_max {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(("c_max", format!("c_max must be non-negative, got {c}")));
            }
        }
        if !(s.mu > 0.0 && s.mu.is_finite()) {
            return Err(("mu", format!("mu must be positive, got {}", s.mu)));
        }
        if self.sampler.samples < 2 {
            return Err((
                "samples",
                format!("samples must be >= 2, got {}", self.sampler.samples),
            ));
        }
        if self.seeds == 0 {
            return Err(("seeds", "seeds must be >= 1".into()));
        }
        if self.horizon == Some(0) {
            return Err(("horizon", "horizon must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err((
                "temperature",
                format!("temperature must be positive, got {}", self.temperature),
            ));
        }
        self.projection
            .validate()
            .map_err(|e| ("projection", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| Error::Config(msg))
    }

    pub fn load_world(&self) -> Result<ObstacleWorld2D> {
        let world = match (&self.world, self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                text.parse::<ObstacleWorld2D>()
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), config_msg(&e))))?
            }
            (None, preset) => ObstacleWorld2D::canonical(preset.unwrap_or(Difficulty::Hard)),
        };
        match self.horizon {
            Some(h) => world.with_horizon(h),
            None => Ok(world),
        }
    }

    /// Builds the world, problem and solver configuration.
    pub fn resolve(&self) -> Result<Experiment> {
        self.validate()?;
        let world = self.load_world()?;
        let problem = ObstacleProblem::new(world.clone(), self.temperature)?;
        let s = &self.schedule;
        let noise = NoiseSchedule::linear(s.beta_start, s.beta_end, s.steps)?;
        let c_max = s.c_max.unwrap_or_else(|| world.max_radius());
        let barrier = BarrierSchedule::new(s.kappa, c_max, s.mu, s.steps)?;
        let mode = match self.algorithm {
            Algorithm::Ebmbd => Mode::EbMbd,
            _ => Mode::Mbd,
        };
        let solver = SolverConfig::new(self.sampler.samples, self.sampler.seed, mode, noise, barrier)?;
        Ok(Experiment {
            config: self.clone(),
            world,
            problem,
            solver,
        })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.sampler.seed + i).collect()
    }
}

fn config_msg(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

fn strip_position(msg: &str) -> &str {
    msg.rfind(" at line ").map_or(msg, |i| &msg[..i])
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// A resolved config, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub world: ObstacleWorld2D,
    pub problem: ObstacleProblem,
    pub solver: SolverConfig,
}

impl Experiment {
    pub fn run_seed(&self, seed: u64) -> Result<RunRecord> {
        let cfg = self.solver.clone().with_seed(seed);
        let proj = &self.config.projection;
        let (x, stats, wall, projection) = match self.config.algorithm {
            Algorithm::Mbd | Algorithm::Ebmbd => {
                let sol = diffusion::solve(&self.problem, &cfg)?;
                (sol.x, sol.stats, sol.wall_time, None)
            }
            Algorithm::ProjectedMbd => {
                let sol = projection::projected_mbd_solve(&self.problem, &cfg, proj)?;
                (sol.x, sol.stats, sol.wall_time, Some(sol.projection))
            }
            Algorithm::DpccMbd => {
                let sol = projection::dpcc_mbd_solve(&self.problem, &cfg, proj)?;
                (sol.x, sol.stats, sol.wall_time, Some(sol.projection))
            }
        };
        debug_assert_eq!(x.len(), self.problem.dim());
        let traj = self.world.rollout(&x)?;
        let terminal = traj.terminal();
        let target = self.world.target();
        let mut config = self.config.clone();
        config.sampler.seed = seed;
        config.seeds = 1;
        Ok(RunRecord {
            algorithm: self.config.algorithm,
            seed,
            final_cost: traj.total_cost,
            final_distance: (terminal[0] - target[0]).hypot(terminal[1] - target[1]),
            min_clearance: traj.min_clearance,
            feasible: traj.is_feasible(),
            wall_time_s: wall.as_secs_f64(),
            projection_iters_total: projection.map(|p| p.projection_iters_total),
            projections_failed: projection.map(|p| p.projections_failed),
            states: traj.states,
            actions: traj.actions,
            stats,
            config,
        })
    }

    /// Runs every seed of the batch on a pool of `workers` threads. Records
    /// come back in seed order whatever the worker count.
    pub fn run_batch(&self, workers: usize) -> Result<Vec<RunRecord>> {
        let seeds = self.config.seed_list();
        with_workers(workers, || {
            seeds
                .par_iter()
                .map(|&seed| self.run_seed(seed))
                .collect::<Result<Vec<_>>>()
        })?
    }
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(invalid("workers", "must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Field names every run record carries, in serialization order.
pub const RUN_RECORD_FIELDS: [&str; 14] = [
    "algorithm",
    "seed",
    "final_cost",
    "final_distance",
    "min_clearance",
    "feasible",
    "wall_time_s",
    "projection_iters_total",
    "projections_failed",
    "states",
    "actions",
    "stats",
    "config",
    "schema",
];

const SCHEMA_VERSION: u32 = 1;

/// One solver run, as written to `runs/<seed>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub final_cost: f64,
    pub final_distance: f64,
    pub min_clearance: f64,
    pub feasible: bool,
    pub wall_time_s: f64,
    /// Only set for the projection baselines.
    pub projection_iters_total: Option<usize>,
    pub projections_failed: Option<usize>,
    pub states: Vec<Vec2>,
    pub actions: Vec<Vec2>,
    pub stats: Vec<IterationStats>,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Versioned<'a> {
    #[serde(flatten)]
    record: &'a RunRecord,
    schema: u32,
}

#[derive(Deserialize)]
struct VersionedOwned {
    #[serde(flatten)]
    record: serde_json::Value,
    schema: u32,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Versioned {
            record: self,
            schema: SCHEMA_VERSION,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: VersionedOwned = serde_json::from_str(text)?;
        if v.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "run record schema {} is not supported (expected {SCHEMA_VERSION})",
                v.schema
            )));
        }
        Ok(serde_json::from_value(v.record)?)
    }

    pub fn liveliness(&self) -> Result<Vec<analysis::LivelinessRow>> {
        analysis::liveliness_trace(&self.stats)
    }
}

/// Aggregate columns for one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_cost: f64,
    pub mean_final_distance: f64,
    pub feasibility_pct: f64,
    pub mean_wall_time_s: f64,
}

pub const SUMMARY_CSV_HEADER: &str =
    "algorithm,runs,mean_cost,mean_final_distance,feasibility_pct,mean_wall_time_s";

impl Summary {
    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| invalid("records", "cannot summarise an empty batch"))?;
        if records.iter().any(|r| r.algorithm != first.algorithm) {
            return Err(invalid("records", "records mix algorithms"));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Ok(Summary {
            algorithm: first.algorithm,
            runs: records.len(),
            mean_cost: mean(|r| r.final_cost),
            mean_final_distance: mean(|r| r.final_distance),
            feasibility_pct: 100.0 * mean(|r| if r.feasible { 1.0 } else { 0.0 }),
            mean_wall_time_s: mean(|r| r.wall_time_s),
        })
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.algorithm,
            self.runs,
            self.mean_cost,
            self.mean_final_distance,
            self.feasibility_pct,
            self.mean_wall_time_s
        )
    }
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<Summary>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SUMMARY_CSV_HEADER => {}
        _ => return Err(Error::Config("line 1: unexpected summary header".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Config(format!("line {}: {what}", i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad(&format!("expected 6 columns, got {}", cols.len())));
            }
            let num = |j: usize| cols[j].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", cols[j])));
            Ok(Summary {
                algorithm: cols[0].parse().map_err(|e| bad(&config_msg(&e)))?,
                runs: cols[1].parse().map_err(|_| bad(&format!("bad count `{}`", cols[1])))?,
                mean_cost: num(2)?,
                mean_final_distance: num(3)?,
                feasibility_pct: num(4)?,
                mean_wall_time_s: num(5)?,
            })
        })
        .collect()
}

/// Fixed-width table for terminals.
pub fn summary_table(rows: &[Summary]) -> String {
    let mut out = format!(
        "{:<14} {:>5} {:>12} {:>14} {:>10} {:>12}\n",
        "algorithm", "runs", "mean cost", "mean distance", "feasible %", "mean time s"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>5} {:>12.3} {:>14.4} {:>10.1} {:>12.4}\n",
            r.algorithm.name(),
            r.runs,
            r.mean_cost,
            r.mean_final_distance,
            r.feasibility_pct,
            r.mean_wall_time_s
        ));
    }
    out
}

pub const LIVELINESS_CSV_HEADER: &str = "seed,step,s,violation_pct";

pub fn liveliness_csv(records: &[RunRecord]) -> Result<String> {
    let mut out = String::from(LIVELINESS_CSV_HEADER);
    out.push('\n');
    for rec in records {
        for row in rec.liveliness()? {
            out.push_str(&format!("{},{},{},{}\n", rec.seed, row.step, row.s, row.violation_pct));
        }
    }
    Ok(out)
}

pub fn liveliness_file_name(kappa: f64) -> String {
    format!("liveliness_{kappa}.csv")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Writes `runs/<seed>.json` for each record under `dir`.
pub fn write_records(dir: &Path, records: &[RunRecord]) -> Result<()> {
    for rec in records {
        write(&dir.join("runs").join(format!("{}.json", rec.seed)), &rec.to_json()?)?;
    }
    Ok(())
}

/// Reads every `runs/*.json` under `dir`, sorted by seed.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = dir.join("runs");
    let mut records = Vec::new();
    for entry in fs::read_dir(&runs)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let rec = RunRecord::from_json(&fs::read_to_string(&path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!("no run records in {}", runs.display())));
    }
    records.sort_by_key(|r| r.seed);
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

/// `run`: one batch, written as per-seed records, `summary.csv` and the
/// liveliness trace for the configured kappa.
pub fn run(cfg: &RunConfig, workers: usize) -> Result<BatchOutput> {
    let exp = cfg.resolve()?;
    let records = exp.run_batch(workers)?;
    let summary = Summary::from_records(&records)?;
    write_records(&cfg.out, &records)?;
    write(&cfg.out.join("summary.csv"), &summary_csv(std::slice::from_ref(&summary)))?;
    write(
        &cfg.out.join(liveliness_file_name(cfg.schedule.kappa)),
        &liveliness_csv(&records)?,
    )?;
    Ok(BatchOutput { records, summary })
}

/// `compare`: runs each config (all on the same world) and writes one
/// summary row per config to `<out>/summary.csv`, with per-algorithm record
/// directories beneath it.
pub fn compare(cfgs: &[RunConfig], out: &Path, workers: usize) -> Result<Vec<BatchOutput>> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one config".into()))?;
    let reference = first.load_world()?;
    for cfg in &cfgs[1..] {
        if cfg.load_world()? != reference {
            return Err(Error::Config(format!(
                "{} config uses a different world than {}",
                cfg.algorithm, first.algorithm
            )));
        }
    }
    let mut outputs = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let mut cfg = cfg.clone();
        cfg.out = out.join(cfg.algorithm.name());
        outputs.push(run(&cfg, workers)?);
    }
    let rows: Vec<Summary> = outputs.iter().map(|o| o.summary.clone()).collect();
    write(&out.join("summary.csv"), &summary_csv(&rows))?;
    Ok(outputs)
}

/// `sweep-kappa`: one batch per kappa, each leaving `liveliness_<kappa>.csv`
/// in `out` (records go to `out/kappa_<kappa>/runs`).
pub fn sweep_kappa(cfg: &RunConfig, kappas: &[f64], workers: usize) -> Result<Vec<BatchOutput>> {
    if kappas.is_empty() {
        return Err(Error::Config("kappa sweep needs at least one kappa".into()));
    }
    let mut outputs = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let mut c = cfg.clone();
        c.schedule.kappa = kappa;
        c.out = cfg.out.join(format!("kappa_{kappa}"));
        let exp = c.resolve()?;
        let records = exp.run_batch(workers)?;
        write_records(&c.out, &records)?;
        write(&cfg.out.join(liveliness_file_name(kappa)), &liveliness_csv(&records)?)?;
        let summary = Summary::from_records(&records)?;
        outputs.push(BatchOutput { records, summary });
    }
    Ok(outputs)
}

/// `validate-bounds`: Monte Carlo check of every scenario, written to
/// `<out>/bounds.csv`.
pub fn validate_bounds(
    scenarios: &[Scenario],
    draws: usize,
    seed: u64,
    out: &Path,
    workers: usize,
) -> Result<Vec<BoundCheck>> {
    let checks = with_workers(workers, || analysis::validate_bounds(scenarios, draws, seed))?;
    write(&out.join("bounds.csv"), &analysis::bounds_csv(&checks))?;
    Ok(checks)
}
