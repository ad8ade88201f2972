//! Liveliness analysis: half-space Gaussian probabilities, the per-iterate
//! and boundary-layer lower bounds on the alive probability, and Monte Carlo
//! checks of both.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::IterationStats;
use crate::error::{invalid, Error, Result};

/// Standard normal CDF, `0.5 erfc(-x / sqrt 2)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Half-space `{x : w^T x + b >= 0}` with unit-norm `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    w: Vec<f64>,
    b: f64,
}

impl LinearConstraint {
    /// Rescales `(w, b)` so that `|w| = 1`; the half-space is unchanged.
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        let n = l2(&w);
        if !(n > 0.0 && n.is_finite()) {
            return Err(invalid("w", "must be a non-zero finite vector"));
        }
        Ok(Self {
            w: w.iter().map(|v| v / n).collect(),
            b: b / n,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }
}

/// `P(w^T X + b >= 0)` for `X ~ N(mean, sigma^2 I)`; `w` need not be unit.
pub fn halfspace_gaussian_probability(mean: &[f64], sigma: f64, w: &[f64], b: f64) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    assert_eq!(mean.len(), w.len(), "mean and w dimensions differ");
    std_normal_cdf((dot(mean, w) + b) / (sigma * l2(w)))
}

/// Shrinkage factor `(1 - sqrt(abp)) / sqrt(abp)` of the proposal mean.
fn shrinkage(alpha_bar_prev: f64) -> f64 {
    let r = alpha_bar_prev.sqrt();
    (1.0 - r) / r
}

/// Lower bound on the alive probability of a proposal drawn around `x_s`.
pub fn lemma1_bound(x_s: &[f64], g_of_x: f64, c_s: f64, sigma_s: f64, alpha_bar_prev: f64) -> f64 {
    debug_assert!(sigma_s > 0.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0);
    std_normal_cdf((g_of_x + c_s - shrinkage(alpha_bar_prev) * l2(x_s)) / sigma_s)
}

/// Exact alive probability for a linear constraint, before the Lipschitz
/// relaxation: `Phi((g(x_s / sqrt(abp)) + c) / sigma)`.
pub fn lemma1_exact(
    x_s: &[f64],
    constraint: &LinearConstraint,
    c_s: f64,
    sigma_s: f64,
    alpha_bar_prev: f64,
) -> f64 {
    let scale = 1.0 / alpha_bar_prev.sqrt();
    let mean: Vec<f64> = x_s.iter().map(|v| v * scale).collect();
    halfspace_gaussian_probability(&mean, sigma_s, constraint.w(), constraint.b() + c_s)
}

/// Inputs of the boundary-layer bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub mu_next: f64,
    /// Lipschitz constant of the cost on `|x| <= R`.
    pub l_j: f64,
    /// Lipschitz constant of the cost gradient.
    pub m_j: f64,
    pub r: f64,
    pub c_s: f64,
    pub c_next: f64,
    pub sigma_s: f64,
    pub alpha_bar_prev: f64,
}

impl BoundInputs {
    /// Builds the inputs with `L_J = |grad J(0)| + M_J R`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_gradient_bound(
        mu_next: f64,
        grad_at_origin: f64,
        m_j: f64,
        r: f64,
        c_s: f64,
        c_next: f64,
        sigma_s: f64,
        alpha_bar_prev: f64,
    ) -> Self {
        Self {
            mu_next,
            l_j: grad_at_origin + m_j * r,
            m_j,
            r,
            c_s,
            c_next,
            sigma_s,
            alpha_bar_prev,
        }
    }
}

/// Alive-probability lower bound for an iterate sitting in the barrier's
/// boundary layer.
pub fn theorem1_bound(inp: &BoundInputs) -> f64 {
    let arg = inp.mu_next / inp.l_j - shrinkage(inp.alpha_bar_prev) * inp.r + inp.c_s - inp.c_next;
    std_normal_cdf(arg / inp.sigma_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LivelinessRow {
    pub step: usize,
    pub s: usize,
    pub violation_pct: f64,
}

/// Per-step violation percentage `100 (1 - alive_fraction)`; `step` counts
/// reverse updates from 0.
pub fn liveliness_trace(stats: &[IterationStats]) -> Result<Vec<LivelinessRow>> {
    if stats.is_empty() {
        return Err(invalid("stats", "liveliness trace needs at least one step"));
    }
    Ok(stats
        .iter()
        .enumerate()
        .map(|(step, st)| LivelinessRow {
            step,
            s: st.s,
            violation_pct: if st.dead_batch {
                100.0
            } else {
                100.0 * (1.0 - st.alive_fraction)
            },
        })
        .collect())
}

/// Monte Carlo alive fraction `P(w^T X + b + c >= 0)` for
/// `X ~ N(mean, sigma^2 I)`, with its standard error. The error uses the
/// add-half proportion so it stays positive when no (or every) draw is alive.
pub fn mc_alive_fraction(
    mean: &[f64],
    sigma: f64,
    constraint: &LinearConstraint,
    c: f64,
    draws: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let mut alive = 0usize;
    let mut x = vec![0.0; mean.len()];
    for _ in 0..draws {
        for (xi, &m) in x.iter_mut().zip(mean) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = m + sigma * z;
        }
        if constraint.eval(&x) + c >= 0.0 {
            alive += 1;
        }
    }
    let n = draws as f64;
    let p = alive as f64 / n;
    let smoothed = (alive as f64 + 0.5) / (n + 1.0);
    (p, (smoothed * (1.0 - smoothed) / n).sqrt())
}

/// Per-iterate scenario on a linear constraint. `w = e_1`, and `x_s` has norm
/// `x_norm` at angle `acos(cos_angle)` from `w`; `b` is chosen so that
/// `g(x_s) = g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaScenario {
    pub id: usize,
    pub dim: usize,
    pub g: f64,
    pub c: f64,
    pub sigma: f64,
    pub alpha_bar_prev: f64,
    pub x_norm: f64,
    pub cos_angle: f64,
}

impl LemmaScenario {
    pub fn iterate(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        x[0] = self.x_norm * self.cos_angle;
        if self.dim > 1 {
            x[1] = self.x_norm * (1.0 - self.cos_angle.powi(2)).max(0.0).sqrt();
        }
        x
    }

    pub fn constraint(&self) -> LinearConstraint {
        let mut w = vec![0.0; self.dim];
        w[0] = 1.0;
        let x = self.iterate();
        LinearConstraint::new(w, self.g - x[0]).expect("unit axis")
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid("dim", "lemma scenarios need dim >= 2"));
        }
        check_common(self.sigma, self.alpha_bar_prev)?;
        if !(-1.0..=1.0).contains(&self.cos_angle) || self.x_norm < 0.0 || self.c < 0.0 {
            return Err(invalid("scenario", format!("lemma scenario {} out of range", self.id)));
        }
        Ok(())
    }
}

/// Boundary-layer scenario satisfying the linear-constraint, smooth-cost,
/// bounded-minimum and optimal-iterate assumptions exactly.
///
/// `g(x) = x_1`; `J(x) = (m_j / 2) |x - x_goal|^2` with
/// `x_goal = (-goal_depth, goal_lateral, 0, ...)`. The iterate is the
/// minimizer of `J(x) - mu_next log(g(x) + c_next)`, found in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremScenario {
    pub id: usize,
    pub dim: usize,
    pub mu_next: f64,
    pub m_j: f64,
    pub goal_depth: f64,
    pub goal_lateral: f64,
    pub c_s: f64,
    pub c_next: f64,
    pub sigma: f64,
    pub alpha_bar_prev: f64,
}

impl TheoremScenario {
    pub fn goal(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        g[0] = -self.goal_depth;
        g[1] = self.goal_lateral;
        g
    }

    pub fn constraint(&self) -> LinearConstraint {
        let mut w = vec![0.0; self.dim];
        w[0] = 1.0;
        LinearConstraint::new(w, 0.0).expect("unit axis")
    }

    /// Minimizer of the barrier-augmented cost: `x_goal + t w` where
    /// `m_j t (g(x_goal) + t + c_next) = mu_next`.
    pub fn boundary_minimum(&self) -> Vec<f64> {
        let a = -self.goal_depth + self.c_next;
        let t = 0.5 * (-a + (a * a + 4.0 * self.mu_next / self.m_j).sqrt());
        let mut x = self.goal();
        x[0] += t;
        x
    }

    pub fn cost_gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.goal()).map(|(a, b)| self.m_j * (a - b)).collect()
    }

    pub fn bound_inputs(&self) -> BoundInputs {
        let r = l2(&self.boundary_minimum());
        let grad0 = l2(&self.cost_gradient(&vec![0.0; self.dim]));
        BoundInputs::from_gradient_bound(
            self.mu_next,
            grad0,
            self.m_j,
            r,
            self.c_s,
            self.c_next,
            self.sigma,
            self.alpha_bar_prev,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid("dim", "theorem scenarios need dim >= 2"));
        }
        check_common(self.sigma, self.alpha_bar_prev)?;
        if !(self.mu_next > 0.0 && self.m_j > 0.0 && self.c_s >= 0.0 && self.c_next >= 0.0) {
            return Err(invalid("scenario", format!("theorem scenario {} out of range", self.id)));
        }
        Ok(())
    }
}

fn check_common(sigma: f64, alpha_bar_prev: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if !(alpha_bar_prev > 0.0 && alpha_bar_prev < 1.0) {
        return Err(invalid(
            "alpha_bar_prev",
            format!("must be in (0, 1), got {alpha_bar_prev}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    Lemma1(LemmaScenario),
    Theorem1(TheoremScenario),
}

impl Scenario {
    pub fn id(&self) -> usize {
        match self {
            Scenario::Lemma1(s) => s.id,
            Scenario::Theorem1(s) => s.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::Lemma1(_) => "lemma1",
            Scenario::Theorem1(_) => "theorem1",
        }
    }
}

/// One row of a bound-validation report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub id: usize,
    pub kind: &'static str,
    pub bound: f64,
    /// Exact linear-constraint probability, for reference.
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Slack, in standard errors, allowed below a bound.
pub const STDERR_SLACK: f64 = 4.0;

/// Evaluates the bound and its Monte Carlo estimate for one scenario.
pub fn check_scenario(scenario: &Scenario, draws: usize, seed: u64) -> BoundCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scenario.id() as u64).wrapping_mul(0x9e37_79b9));
    let (x_s, constraint, c, sigma, abp, bound) = match scenario {
        Scenario::Lemma1(l) => {
            let x = l.iterate();
            let bound = lemma1_bound(&x, l.g, l.c, l.sigma, l.alpha_bar_prev);
            (x, l.constraint(), l.c, l.sigma, l.alpha_bar_prev, bound)
        }
        Scenario::Theorem1(t) => {
            let bound = theorem1_bound(&t.bound_inputs());
            (t.boundary_minimum(), t.constraint(), t.c_s, t.sigma, t.alpha_bar_prev, bound)
        }
    };
    let scale = 1.0 / abp.sqrt();
    let mean: Vec<f64> = x_s.iter().map(|v| v * scale).collect();
    let (estimate, stderr) = mc_alive_fraction(&mean, sigma, &constraint, c, draws, &mut rng);
    BoundCheck {
        id: scenario.id(),
        kind: scenario.kind(),
        bound,
        exact: lemma1_exact(&x_s, &constraint, c, sigma, abp),
        estimate,
        stderr,
        pass: estimate >= bound - STDERR_SLACK * stderr,
    }
}

/// Checks every scenario in parallel; the report keeps input order.
pub fn validate_bounds(scenarios: &[Scenario], draws: usize, seed: u64) -> Vec<BoundCheck> {
    scenarios
        .par_iter()
        .map(|s| check_scenario(s, draws, seed))
        .collect()
}

/// Pseudo-random per-iterate scenarios spanning both sides of the bound.
pub fn default_lemma_scenarios(count: usize, seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            Scenario::Lemma1(LemmaScenario {
                id,
                dim: rng.random_range(2..=6),
                g: rng.random_range(-1.0..1.0),
                c: rng.random_range(0.0..1.0),
                sigma: rng.random_range(0.05..1.5),
                alpha_bar_prev: rng.random_range(0.2..0.9999),
                x_norm: rng.random_range(0.0..3.0),
                cos_angle: rng.random_range(-1.0..=1.0),
            })
        })
        .collect()
}

/// Pseudo-random boundary-layer scenarios.
pub fn default_theorem_scenarios(count: usize, first_id: usize, seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let c_next = rng.random_range(0.0..1.0);
            Scenario::Theorem1(TheoremScenario {
                id: first_id + k,
                dim: rng.random_range(2..=6),
                mu_next: rng.random_range(0.05..2.0),
                m_j: rng.random_range(0.5..5.0),
                goal_depth: rng.random_range(0.0..2.0),
                goal_lateral: rng.random_range(-1.0..1.0),
                c_s: c_next * rng.random_range(0.0..1.0),
                c_next,
                sigma: rng.random_range(0.02..1.0),
                alpha_bar_prev: rng.random_range(0.5..0.9999),
            })
        })
        .collect()
}

/// Parses a whitespace-separated scenario table. Blank lines and lines
/// starting with `#` are skipped. Row formats:
///
/// ```text
/// lemma1   <id> <dim> <g> <c> <sigma> <alpha_bar_prev> <x_norm> <cos_angle>
/// theorem1 <id> <dim> <mu_next> <m_j> <goal_depth> <goal_lateral> <c_s> <c_next> <sigma> <alpha_bar_prev>
/// ```
pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .ok_or_else(|| err(format!("missing column {}", i + 1)))?
                .parse::<f64>()
                .map_err(|e| err(format!("column {}: {e}", i + 1)))
        };
        let int = |i: usize| -> Result<usize> {
            fields
                .get(i)
                .ok_or_else(|| err(format!("missing column {}", i + 1)))?
                .parse::<usize>()
                .map_err(|e| err(format!("column {}: {e}", i + 1)))
        };
        let scenario = match fields[0] {
            "lemma1" => {
                if fields.len() != 9 {
                    return Err(err(format!("lemma1 rows have 9 columns, got {}", fields.len())));
                }
                let s = LemmaScenario {
                    id: int(1)?,
                    dim: int(2)?,
                    g: num(3)?,
                    c: num(4)?,
                    sigma: num(5)?,
                    alpha_bar_prev: num(6)?,
                    x_norm: num(7)?,
                    cos_angle: num(8)?,
                };
                s.validate().map_err(|e| err(e.to_string()))?;
                Scenario::Lemma1(s)
            }
            "theorem1" => {
                if fields.len() != 11 {
                    return Err(err(format!("theorem1 rows have 11 columns, got {}", fields.len())));
                }
                let s = TheoremScenario {
                    id: int(1)?,
                    dim: int(2)?,
                    mu_next: num(3)?,
                    m_j: num(4)?,
                    goal_depth: num(5)?,
                    goal_lateral: num(6)?,
                    c_s: num(7)?,
                    c_next: num(8)?,
                    sigma: num(9)?,
                    alpha_bar_prev: num(10)?,
                };
                s.validate().map_err(|e| err(e.to_string()))?;
                Scenario::Theorem1(s)
            }
            other => return Err(err(format!("unknown scenario kind `{other}`"))),
        };
        out.push(scenario);
    }
    Ok(out)
}

pub fn format_scenarios(scenarios: &[Scenario]) -> String {
    let mut s = String::from(
        "# lemma1   id dim g c sigma alpha_bar_prev x_norm cos_angle\n\
         # theorem1 id dim mu_next m_j goal_depth goal_lateral c_s c_next sigma alpha_bar_prev\n",
    );
    for sc in scenarios {
        let _ = match sc {
            Scenario::Lemma1(l) => writeln!(
                s,
                "lemma1 {} {} {} {} {} {} {} {}",
                l.id, l.dim, l.g, l.c, l.sigma, l.alpha_bar_prev, l.x_norm, l.cos_angle
            ),
            Scenario::Theorem1(t) => writeln!(
                s,
                "theorem1 {} {} {} {} {} {} {} {} {} {}",
                t.id,
                t.dim,
                t.mu_next,
                t.m_j,
                t.goal_depth,
                t.goal_lateral,
                t.c_s,
                t.c_next,
                t.sigma,
                t.alpha_bar_prev
            ),
        };
    }
    s
}

pub const BOUNDS_CSV_HEADER: &str = "id,kind,bound,exact,estimate,stderr,pass";

pub fn bounds_csv(checks: &[BoundCheck]) -> String {
    let mut s = format!("{BOUNDS_CSV_HEADER}\n");
    for c in checks {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.id, c.kind, c.bound, c.exact, c.estimate, c.stderr, c.pass
        );
    }
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
