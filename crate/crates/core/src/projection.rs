//! Projection baselines: a local solver for
//! `min |x - x_d|^2 s.t. g(x) + c >= 0` and the two MBD variants that
//! project their iterates every reverse step.
//!
//! The constraint is treated as a black box; its gradient comes from
//! central finite differences.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_pass, IterationStats, Mode, SolverConfig};
use crate::error::{invalid, Result};
use crate::problem::{Evaluation, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    /// Cap on Jacobian evaluations across all augmented-Lagrangian rounds.
    pub max_iters: usize,
    /// Feasibility and stationarity tolerance.
    pub tol: f64,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            fd_step: 1e-5,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", format!("must be positive, got {}", self.tol)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(invalid("backtrack", "must be in (0, 1)"));
        }
        if !(self.fd_step > 0.0) {
            return Err(invalid("fd_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub x: Vec<f64>,
    pub converged: bool,
    /// Constraint-gradient evaluations spent.
    pub iters: usize,
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector function; row `i` is the gradient
/// of output `i`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], rel_step: f64) -> Vec<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for k in 0..x.len() {
        let h = rel_step * x[k].abs().max(1.0);
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        if rows.is_empty() {
            rows = vec![vec![0.0; x.len()]; up.len()];
        }
        for (row, (u, d)) in rows.iter_mut().zip(up.iter().zip(&down)) {
            row[k] = (u - d) / (2.0 * h);
        }
    }
    rows
}

/// Projects `target` onto `{g(x) + c >= 0}`, starting the search at `target`.
/// Feasible inputs are returned unchanged.
pub fn project<P: Problem + ?Sized>(
    problem: &P,
    target: &[f64],
    c: f64,
    cfg: &ProjectionConfig,
) -> ProjectionResult {
    project_from(problem, target, target, c, cfg)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Solves `(rows rows^T + ridge I) z = rhs` for the selected rows.
fn gram_solve(rows: &[&[f64]], ridge: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let k = rows.len();
    let gram = DMatrix::from_fn(k, k, |i, j| {
        dot(rows[i], rows[j]) + if i == j { ridge } else { 0.0 }
    });
    let z = gram.cholesky()?.solve(&DVector::from_column_slice(rhs));
    Some(z.iter().copied().collect())
}

/// Gauss-Newton direction for the merit: its curvature is
/// `2I + rho J^T J` over the active rows, inverted by the Woodbury identity.
fn merit_direction(grad: &[f64], active: &[&[f64]], rho: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = grad.iter().map(|g| 0.5 * g).collect();
    if active.is_empty() {
        return dir;
    }
    let rhs: Vec<f64> = active.iter().map(|r| dot(r, grad)).collect();
    if let Some(z) = gram_solve(active, 2.0 / rho, &rhs) {
        for (zi, row) in z.iter().zip(active) {
            for (d, r) in dir.iter_mut().zip(row.iter()) {
                *d -= 0.5 * zi * r;
            }
        }
    }
    dir
}

/// As [`project`] but starts the local search at `start`.
///
/// Augmented Lagrangian over the problem's constraint terms (all of which
/// must end up `>= -c`), with Gauss-Newton inner steps, Armijo backtracking
/// and finite-difference Jacobians.
pub fn project_from<P: Problem + ?Sized>(
    problem: &P,
    target: &[f64],
    start: &[f64],
    c: f64,
    cfg: &ProjectionConfig,
) -> ProjectionResult {
    if problem.constraint(target) + c >= 0.0 {
        return ProjectionResult {
            x: target.to_vec(),
            converged: true,
            iters: 0,
        };
    }
    let terms = |x: &[f64]| -> Vec<f64> {
        let mut t = problem.constraint_terms(x);
        t.iter_mut().for_each(|v| *v += c);
        t
    };
    let dist2 = |x: &[f64]| -> f64 { x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum() };
    let merit = |x: &[f64], hx: &[f64], y: &[f64], rho: f64| -> f64 {
        let penalty: f64 = hx
            .iter()
            .zip(y)
            .map(|(&h, &y)| {
                let v = (y - rho * h).max(0.0);
                v * v - y * y
            })
            .sum();
        dist2(x) + penalty / (2.0 * rho)
    };
    let weights = |hx: &[f64], y: &[f64], rho: f64| -> Vec<f64> {
        hx.iter().zip(y).map(|(&h, &y)| (y - rho * h).max(0.0)).collect()
    };
    // 2 (x - target) - sum_i w_i grad h_i
    let lagrangian_grad = |x: &[f64], jac: &[Vec<f64>], w: &[f64]| -> Vec<f64> {
        let mut g: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        for (wi, row) in w.iter().zip(jac) {
            if *wi > 0.0 {
                g.iter_mut().zip(row).for_each(|(gk, rk)| *gk -= wi * rk);
            }
        }
        g
    };

    let mut x = start.to_vec();
    let mut hx = terms(&x);
    let mut y = vec![0.0; hx.len()];
    let mut rho = 10.0;
    let mut iters = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut converged = false;
    // Inner solves stop at a looser gradient tolerance, tightened each round.
    let mut inner_tol = 1.0_f64.max(cfg.tol);
    let mut last_violation = f64::INFINITY;

    'outer: while iters < cfg.max_iters {
        let mut stalled = false;
        loop {
            if iters >= cfg.max_iters {
                break 'outer;
            }
            let jac = fd_jacobian(terms, &x, cfg.fd_step);
            iters += 1;
            let w = weights(&hx, &y, rho);
            let grad = lagrangian_grad(&x, &jac, &w);
            let gnorm2 = dot(&grad, &grad);
            if gnorm2.sqrt() <= inner_tol {
                break;
            }
            let active: Vec<&[f64]> = jac
                .iter()
                .zip(&w)
                .filter(|(_, wi)| **wi > 0.0)
                .map(|(r, _)| r.as_slice())
                .collect();
            let dir = merit_direction(&grad, &active, rho);
            let slope = dot(&grad, &dir);
            let f0 = merit(&x, &hx, &y, rho);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - t * d).collect();
                let ht = terms(&trial);
                if merit(&trial, &ht, &y, rho) <= f0 - cfg.armijo * t * slope {
                    x = trial;
                    hx = ht;
                    accepted = true;
                    break;
                }
                t *= cfg.backtrack;
            }
            if !accepted {
                stalled = true;
                break;
            }
        }

        // A stalled merit descent falls back to a minimum-norm Newton step
        // on the violated terms.
        if stalled && min_of(&hx) < -cfg.tol {
            let jac = fd_jacobian(terms, &x, cfg.fd_step);
            iters += 1;
            let (rows, rhs): (Vec<&[f64]>, Vec<f64>) = jac
                .iter()
                .zip(&hx)
                .filter(|(_, h)| **h < 0.0)
                .map(|(r, h)| (r.as_slice(), cfg.tol - h))
                .unzip();
            if let Some(z) = gram_solve(&rows, 1e-12, &rhs) {
                let mut delta = vec![0.0; x.len()];
                for (zi, row) in z.iter().zip(&rows) {
                    delta.iter_mut().zip(row.iter()).for_each(|(d, r)| *d += zi * r);
                }
                let mut t = 1.0;
                for _ in 0..cfg.max_backtracks {
                    let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
                    let ht = terms(&trial);
                    if min_of(&ht) > min_of(&hx) {
                        x = trial;
                        hx = ht;
                        break;
                    }
                    t *= cfg.backtrack;
                }
            }
        }

        let worst = min_of(&hx);
        if worst >= -cfg.tol {
            let d = dist2(&x);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x.clone()));
            }
        }
        let next = weights(&hx, &y, rho);
        let jac = fd_jacobian(terms, &x, cfg.fd_step);
        iters += 1;
        let stationarity = lagrangian_grad(&x, &jac, &next);
        let kkt = dot(&stationarity, &stationarity).sqrt();
        let scale = 1.0 + 2.0 * dist2(&x).sqrt();
        let slack_ok = next
            .iter()
            .zip(&hx)
            .all(|(&n, &h)| n == 0.0 || h <= cfg.tol.sqrt());
        if worst >= -cfg.tol && slack_ok && kkt <= cfg.tol.sqrt() * scale {
            converged = true;
            break;
        }
        y = next;
        inner_tol = (inner_tol * 0.1).max(cfg.tol);
        let violation = (-worst).max(0.0);
        if violation > 0.25 * last_violation {
            rho = (rho * 10.0).min(1e8);
        }
        last_violation = violation;
    }

    if min_of(&hx) >= -cfg.tol {
        let d = dist2(&x);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x.clone()));
        }
    }
    match best {
        Some((_, bx)) => ProjectionResult {
            converged: converged || problem.constraint(&bx) + c >= -cfg.tol,
            x: bx,
            iters,
        },
        None => ProjectionResult {
            x,
            converged: false,
            iters,
        },
    }
}

/// Bookkeeping of the projections made during one solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub projections: usize,
    pub projection_iters_total: usize,
    pub projections_failed: usize,
}

#[derive(Debug, Clone)]
pub struct ProjectedSolution {
    pub x: Vec<f64>,
    pub evaluation: Evaluation,
    pub stats: Vec<IterationStats>,
    pub projection: ProjectionStats,
    pub wall_time: Duration,
}

impl ProjectedSolution {
    pub fn is_feasible(&self) -> bool {
        self.evaluation.constraint >= 0.0
    }
}

/// MBD whose every new iterate is projected onto `{g >= 0}`.
pub fn projected_mbd_solve<P: Problem + ?Sized>(
    problem: &P,
    cfg: &SolverConfig,
    proj: &ProjectionConfig,
) -> Result<ProjectedSolution> {
    solve_with_offsets(problem, cfg, proj, |_| 0.0)
}

/// MBD projecting every iterate onto the relaxed set `{g + c_s >= 0}`, with
/// `c_s` taken from the barrier schedule.
pub fn dpcc_mbd_solve<P: Problem + ?Sized>(
    problem: &P,
    cfg: &SolverConfig,
    proj: &ProjectionConfig,
) -> Result<ProjectedSolution> {
    let offsets = cfg.barrier().c().to_vec();
    solve_with_offsets(problem, cfg, proj, move |s| offsets[s])
}

/// MBD projecting onto `{g + offset(s) >= 0}` after every step. What gets
/// projected is the next proposal center `x / sqrt(alpha_bar[s-1])` (the
/// final output when `s = 0`); the result is mapped back to the iterate.
pub fn solve_with_offsets<P, C>(
    problem: &P,
    cfg: &SolverConfig,
    proj: &ProjectionConfig,
    offset: C,
) -> Result<ProjectedSolution>
where
    P: Problem + ?Sized,
    C: Fn(usize) -> f64,
{
    proj.validate()?;
    let cfg = cfg.clone().with_mode(Mode::Mbd);
    let mut pstats = ProjectionStats::default();
    let start = Instant::now();
    let noise = cfg.noise().clone();
    let (x, stats) = reverse_pass(problem, &cfg, |s, x| {
        let scale = noise.alpha_bar_prev(s).sqrt();
        let center: Vec<f64> = x.iter().map(|v| v / scale).collect();
        let res = project(problem, &center, offset(s), proj);
        pstats.projections += 1;
        pstats.projection_iters_total += res.iters;
        if !res.converged {
            pstats.projections_failed += 1;
        }
        if res.iters > 0 {
            *x = res.x.iter().map(|v| v * scale).collect();
        }
    })?;
    let wall_time = start.elapsed();
    Ok(ProjectedSolution {
        evaluation: problem.evaluate(&x),
        x,
        stats,
        projection: pstats,
        wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::solve;
    use crate::problem::FnProblem;
    use crate::schedule::{BarrierSchedule, NoiseSchedule};

    fn circle(center: [f64; 2], r: f64) -> impl Fn(&[f64]) -> f64 + Sync {
        move |x: &[f64]| ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)).sqrt() - r
    }

    #[test]
    fn feasible_input_is_untouched() {
        let p = FnProblem::new(2, 1.0, |_: &[f64]| 0.0, circle([0.0, 0.0], 1.0));
        let res = project(&p, &[2.0, 0.5], 0.0, &ProjectionConfig::default());
        assert_eq!(res.x, vec![2.0, 0.5]);
        assert_eq!(res.iters, 0);
        assert!(res.converged);
    }

    #[test]
    fn point_inside_circle_lands_on_boundary_ray() {
        let center = [1.0, -0.5];
        let r = 1.2;
        let p = FnProblem::new(2, 1.0, |_: &[f64]| 0.0, circle(center, r));
        let cfg = ProjectionConfig::default();
        for (pt, c) in [([1.3, -0.1], 0.0), ([0.2, -0.9], 0.0), ([1.5, 0.0], 0.4)] {
            let res = project(&p, &pt, c, &cfg);
            assert!(res.converged);
            let d = [pt[0] - center[0], pt[1] - center[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let expect = [center[0] + (r - c) * d[0] / n, center[1] + (r - c) * d[1] / n];
            let err = ((res.x[0] - expect[0]).powi(2) + (res.x[1] - expect[1]).powi(2)).sqrt();
            assert!(err < 1e-3, "{pt:?}: got {:?}, expected {expect:?}", res.x);
        }
    }

    #[test]
    fn fd_gradient_matches_analytic() {
        let center = [0.3, 0.7];
        let g = circle(center, 1.0);
        for pt in [[2.0, 1.0], [-1.0, 0.2], [0.31, 5.0]] {
            let fd = fd_gradient(&g, &pt, 1e-5);
            let d = [pt[0] - center[0], pt[1] - center[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            for k in 0..2 {
                let exact = d[k] / n;
                assert!((fd[k] - exact).abs() <= 1e-4 * exact.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let p = FnProblem::new(2, 1.0, |_: &[f64]| 0.0, circle([0.0, 0.0], 1.0));
        let cfg = ProjectionConfig::default();
        let once = project(&p, &[0.2, 0.3], 0.0, &cfg);
        let twice = project(&p, &once.x, 0.0, &cfg);
        let moved: f64 = once
            .x
            .iter()
            .zip(&twice.x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved <= cfg.tol);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = ProjectionConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ProjectionConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unconstrained_projection_solve_equals_mbd() {
        let p = FnProblem::new(
            4,
            0.1,
            |x: &[f64]| x.iter().map(|v| (v - 0.5).powi(2)).sum(),
            |_: &[f64]| 1e9,
        );
        let steps = 30;
        let cfg = SolverConfig::new(
            32,
            3,
            Mode::Mbd,
            NoiseSchedule::linear(1e-4, 0.02, steps).unwrap(),
            BarrierSchedule::new(1.0, 1.0, 1.0, steps).unwrap(),
        )
        .unwrap();
        let plain = solve(&p, &cfg).unwrap();
        let proj = projected_mbd_solve(&p, &cfg, &ProjectionConfig::default()).unwrap();
        let dpcc = dpcc_mbd_solve(&p, &cfg, &ProjectionConfig::default()).unwrap();
        assert_eq!(plain.x, proj.x);
        assert_eq!(plain.x, dpcc.x);
        assert_eq!(plain.stats, proj.stats);
        assert_eq!(proj.projection.projection_iters_total, 0);
        assert_eq!(proj.projection.projections, steps - 1);
    }

    #[test]
    fn large_constant_offset_equals_mbd() {
        let p = FnProblem::new(
            4,
            0.1,
            |x: &[f64]| x.iter().map(|v| (v - 0.5).powi(2)).sum(),
            |x: &[f64]| x[0] - 3.0,
        );
        let steps = 25;
        let cfg = SolverConfig::new(
            32,
            11,
            Mode::Mbd,
            NoiseSchedule::linear(1e-4, 0.02, steps).unwrap(),
            BarrierSchedule::new(1.0, 1.0, 1.0, steps).unwrap(),
        )
        .unwrap();
        let plain = solve(&p, &cfg).unwrap();
        let relaxed = solve_with_offsets(&p, &cfg, &ProjectionConfig::default(), |_| 1e3).unwrap();
        assert_eq!(plain.x, relaxed.x);
        assert_eq!(relaxed.projection.projection_iters_total, 0);
    }

    #[test]
    fn dpcc_output_meets_tightened_constraint() {
        // Almost no sample reaches x0 >= 3, so the dead-batch means leave
        // infeasible iterates for the projections to fix.
        let p = FnProblem::new(
            3,
            0.05,
            |x: &[f64]| x.iter().map(|v| v * v).sum(),
            |x: &[f64]| x[0] - 3.0,
        );
        let steps = 30;
        let cfg = SolverConfig::new(
            64,
            5,
            Mode::Mbd,
            NoiseSchedule::linear(1e-4, 0.02, steps).unwrap(),
            BarrierSchedule::new(1.0, 2.0, 1.0, steps).unwrap(),
        )
        .unwrap();
        let proj = ProjectionConfig::default();
        let sol = dpcc_mbd_solve(&p, &cfg, &proj).unwrap();
        assert!(sol.evaluation.constraint >= -proj.tol, "{:?}", sol.evaluation);
        assert!(sol.projection.projection_iters_total > 0);
        let sol = projected_mbd_solve(&p, &cfg, &proj).unwrap();
        assert!(sol.evaluation.constraint >= -proj.tol);
    }

    #[test]
    fn close_to_best_of_random_restarts() {
        use crate::problem::{Difficulty, ObstacleProblem, ObstacleWorld2D};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        let world = ObstacleWorld2D::canonical(Difficulty::Easy)
            .with_horizon(6)
            .unwrap();
        let p = ObstacleProblem::new(world, 1.0).unwrap();
        let cfg = ProjectionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut checked = 0;
        while checked < 3 {
            let target: Vec<f64> = (0..p.dim()).map(|_| rng.sample(StandardNormal)).collect();
            if p.constraint(&target) >= 0.0 {
                continue;
            }
            checked += 1;
            let res = project(&p, &target, 0.0, &cfg);
            assert!(res.converged);
            assert!(p.constraint(&res.x) >= -cfg.tol);
            let ours = dist(&res.x, &target);
            let best = (0..200)
                .filter_map(|_| {
                    let start: Vec<f64> = target
                        .iter()
                        .map(|v| v + rng.random_range(-3.0..3.0))
                        .collect();
                    let r = project_from(&p, &target, &start, 0.0, &cfg);
                    (p.constraint(&r.x) >= -cfg.tol).then(|| dist(&r.x, &target))
                })
                .fold(f64::INFINITY, f64::min);
            assert!(ours <= 1.05 * best + 1e-6, "ours {ours}, best restart {best}");
        }
    }
}
