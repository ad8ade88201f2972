//! Reverse-diffusion optimizer with a Monte Carlo score estimate.
//!
//! Each reverse update at index `s` draws `N` proposals around
//! `x_s / sqrt(alpha_bar[s-1])` with std `sigma[s]`, weights them by the
//! (possibly barrier-augmented) target density, and moves the iterate with
//! the deterministic DDPM update. All density arithmetic stays in log space.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::problem::{Evaluation, Problem};
use crate::schedule::{BarrierSchedule, NoiseSchedule};

/// Which target density the sampler weights proposals with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Boltzmann density times the hard feasibility indicator.
    Mbd,
    /// Boltzmann density times the emerging log barrier.
    EbMbd,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    samples: usize,
    seed: u64,
    mode: Mode,
    noise: NoiseSchedule,
    barrier: BarrierSchedule,
}

impl SolverConfig {
    pub fn new(
        samples: usize,
        seed: u64,
        mode: Mode,
        noise: NoiseSchedule,
        barrier: BarrierSchedule,
    ) -> Result<Self> {
        if samples < 2 {
            return Err(invalid("N", format!("need at least 2 samples, got {samples}")));
        }
        if noise.steps() != barrier.steps() {
            return Err(invalid(
                "S",
                format!(
                    "noise schedule has {} steps but barrier schedule has {}",
                    noise.steps(),
                    barrier.steps()
                ),
            ));
        }
        Ok(Self {
            samples,
            seed,
            mode,
            noise,
            barrier,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn noise(&self) -> &NoiseSchedule {
        &self.noise
    }

    pub fn barrier(&self) -> &BarrierSchedule {
        &self.barrier
    }

    pub fn steps(&self) -> usize {
        self.noise.steps()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

/// Diagnostics of one Monte Carlo score estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub s: usize,
    /// Fraction of proposals with non-zero target density.
    pub alive_fraction: f64,
    /// `None` when every proposal is dead.
    pub max_log_density: Option<f64>,
    /// `1 / sum w_i^2`; 0 for a dead batch.
    pub ess: f64,
    pub dead_batch: bool,
}

/// `-mu log(g + c)`, or `+inf` when `g + c <= 0`.
pub fn barrier_cost(g: f64, mu: f64, c: f64) -> f64 {
    let slack = g + c;
    if slack > 0.0 {
        -mu * slack.ln()
    } else {
        f64::INFINITY
    }
}

/// Log of the unnormalized target density for an already evaluated point.
pub fn log_density(eval: Evaluation, temperature: f64, mu: f64, c: f64, mode: Mode) -> f64 {
    let energy = eval.cost / temperature;
    let value = match mode {
        Mode::Mbd => {
            if eval.constraint >= 0.0 {
                -energy
            } else {
                f64::NEG_INFINITY
            }
        }
        Mode::EbMbd => -energy - barrier_cost(eval.constraint, mu, c),
    };
    if value.is_nan() {
        f64::NEG_INFINITY
    } else {
        value
    }
}

pub fn target_log_density<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    mu: f64,
    c: f64,
    mode: Mode,
) -> f64 {
    log_density(problem.evaluate(x), problem.temperature(), mu, c, mode)
}

/// Normalized softmax weights of `log_d`, stabilized by the maximum.
/// Returns `None` when no entry is finite.
pub fn softmax_weights(log_d: &[f64]) -> Option<Vec<f64>> {
    let max = log_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut w: Vec<f64> = log_d.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= total;
    }
    Some(w)
}

/// Deterministic RNG for proposal `index` of the update at step `s`.
pub fn sample_rng(seed: u64, s: usize, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(s as u64)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Score estimate together with the weighted proposal mean it came from.
#[derive(Debug, Clone)]
pub struct ScoreEstimate {
    pub score: Vec<f64>,
    /// Weighted (or, for a dead batch, plain) mean of the proposals.
    pub mean: Vec<f64>,
    pub stats: IterationStats,
}

/// Monte Carlo estimate of `grad log p_s(x_s)` for `s >= 1`.
pub fn mc_score<P: Problem + ?Sized>(
    problem: &P,
    x_s: &[f64],
    s: usize,
    cfg: &SolverConfig,
) -> Result<ScoreEstimate> {
    let dim = problem.dim();
    if x_s.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x_s.len(),
        });
    }
    if s == 0 || s >= cfg.steps() {
        return Err(invalid("s", format!("must be in 1..{}, got {s}", cfg.steps())));
    }
    let noise = cfg.noise();
    let scale = 1.0 / noise.alpha_bar_prev(s).sqrt();
    let sigma = noise.sigma()[s];
    let (mu, c) = (cfg.barrier().mu()[s], cfg.barrier().c()[s]);
    let temperature = problem.temperature();
    let mode = cfg.mode();
    let seed = cfg.seed();

    let draws: Vec<(Vec<f64>, f64)> = (0..cfg.samples())
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, s, i as u64);
            let proposal: Vec<f64> = x_s
                .iter()
                .map(|&x| {
                    let z: f64 = rng.sample(StandardNormal);
                    x * scale + sigma * z
                })
                .collect();
            let ld = log_density(problem.evaluate(&proposal), temperature, mu, c, mode);
            (proposal, ld)
        })
        .collect();

    let log_d: Vec<f64> = draws.iter().map(|(_, l)| *l).collect();
    let n = draws.len() as f64;
    let alive = log_d.iter().filter(|l| l.is_finite()).count();
    let mut mean = vec![0.0; dim];
    let stats = match softmax_weights(&log_d) {
        Some(w) => {
            for ((proposal, _), &wi) in draws.iter().zip(&w) {
                if wi == 0.0 {
                    continue;
                }
                for (m, &p) in mean.iter_mut().zip(proposal) {
                    *m += wi * p;
                }
            }
            IterationStats {
                s,
                alive_fraction: alive as f64 / n,
                max_log_density: log_d.iter().copied().reduce(f64::max),
                ess: 1.0 / w.iter().map(|wi| wi * wi).sum::<f64>(),
                dead_batch: false,
            }
        }
        None => {
            for (proposal, _) in &draws {
                for (m, &p) in mean.iter_mut().zip(proposal) {
                    *m += p / n;
                }
            }
            IterationStats {
                s,
                alive_fraction: 0.0,
                max_log_density: None,
                ess: 0.0,
                dead_batch: true,
            }
        }
    };

    let ab = noise.alpha_bar()[s];
    let score = x_s
        .iter()
        .zip(&mean)
        .map(|(&x, &m)| (-x + ab.sqrt() * m) / (1.0 - ab))
        .collect();
    Ok(ScoreEstimate { score, mean, stats })
}

/// Deterministic DDPM update `(x_s + (1 - alpha_bar[s]) score) / sqrt(alpha[s])`.
pub fn reverse_step(x_s: &[f64], score: &[f64], s: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar()[s];
    let inv = 1.0 / schedule.alpha()[s].sqrt();
    x_s.iter()
        .zip(score)
        .map(|(&x, &g)| inv * (x + (1.0 - ab) * g))
        .collect()
}

/// Result of a full reverse pass.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Final decision vector `x_0`.
    pub x: Vec<f64>,
    pub evaluation: Evaluation,
    /// One entry per reverse update, in execution order (`s = S-1 .. 1`).
    pub stats: Vec<IterationStats>,
    pub wall_time: Duration,
}

impl Solution {
    pub fn is_feasible(&self) -> bool {
        self.evaluation.constraint >= 0.0
    }
}

/// Initial state `x_{S-1} ~ N(0, I)` drawn from the run seed.
pub fn initial_state(dim: usize, cfg: &SolverConfig) -> Vec<f64> {
    let mut rng = sample_rng(cfg.seed(), cfg.steps(), u64::MAX);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs the reverse pass, calling `after_step(s_next, x)` on every new
/// iterate so callers can post-process it (e.g. project it).
pub(crate) fn reverse_pass<P, F>(
    problem: &P,
    cfg: &SolverConfig,
    mut after_step: F,
) -> Result<(Vec<f64>, Vec<IterationStats>)>
where
    P: Problem + ?Sized,
    F: FnMut(usize, &mut Vec<f64>),
{
    let mut x = initial_state(problem.dim(), cfg);
    let mut stats = Vec::with_capacity(cfg.steps() - 1);
    for s in (1..cfg.steps()).rev() {
        let est = mc_score(problem, &x, s, cfg)?;
        x = reverse_step(&x, &est.score, s, cfg.noise());
        after_step(s - 1, &mut x);
        stats.push(est.stats);
    }
    Ok((x, stats))
}

/// Plain MBD or EB-MBD depending on `cfg.mode()`.
pub fn solve<P: Problem + ?Sized>(problem: &P, cfg: &SolverConfig) -> Result<Solution> {
    let start = Instant::now();
    let (x, stats) = reverse_pass(problem, cfg, |_, _| {})?;
    let wall_time = start.elapsed();
    Ok(Solution {
        evaluation: problem.evaluate(&x),
        x,
        stats,
        wall_time,
    })
}
