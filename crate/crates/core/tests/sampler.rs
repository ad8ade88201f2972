use ebmbd_core::diffusion::{mc_score, reverse_step, solve, Mode, SolverConfig};
use ebmbd_core::experiment::{Algorithm, RunConfig};
use ebmbd_core::problem::{Difficulty, FnProblem, ObstacleProblem, ObstacleWorld2D};
use ebmbd_core::schedule::{BarrierSchedule, NoiseSchedule};

fn config(samples: usize, steps: usize, mode: Mode, c_max: f64) -> SolverConfig {
    config_with_weight(samples, steps, mode, c_max, 2000.0)
}

fn config_with_weight(samples: usize, steps: usize, mode: Mode, c_max: f64, mu: f64) -> SolverConfig {
    SolverConfig::new(
        samples,
        7,
        mode,
        NoiseSchedule::linear(1e-4, 0.02, steps).unwrap(),
        BarrierSchedule::new(1.0, c_max, mu, steps).unwrap(),
    )
    .unwrap()
}

// With J = |x|^2 the weighted proposal distribution is a product of two
// Gaussians, so the posterior mean and hence the score are known exactly.
#[test]
fn quadratic_score_matches_closed_form() {
    let temperature = 1.0;
    let problem = FnProblem::new(
        2,
        temperature,
        |x: &[f64]| x.iter().map(|v| v * v).sum(),
        |_: &[f64]| 1.0,
    );
    let cfg = config(400_000, 100, Mode::Mbd, 1.0);
    let noise = cfg.noise();
    for s in [10, 50, 99] {
        let x = [0.8, -1.5];
        let est = mc_score(&problem, &x, s, &cfg).unwrap();
        let center_scale = 1.0 / noise.alpha_bar_prev(s).sqrt();
        let prior_var = temperature / 2.0;
        let sigma2 = noise.sigma()[s].powi(2);
        let shrink = prior_var / (prior_var + sigma2);
        let ab = noise.alpha_bar()[s];
        for k in 0..2 {
            let mean = x[k] * center_scale * shrink;
            let score = (-x[k] + ab.sqrt() * mean) / (1.0 - ab);
            let post_sd = (prior_var * sigma2 / (prior_var + sigma2)).sqrt();
            let tol = 6.0 * post_sd / (est.stats.ess).sqrt();
            assert!(
                (est.mean[k] - mean).abs() <= tol,
                "s={s} k={k}: mean {} vs {mean} (tol {tol})",
                est.mean[k]
            );
            let score_tol = tol * ab.sqrt() / (1.0 - ab);
            assert!((est.score[k] - score).abs() <= score_tol);
        }
        // The reverse update lands on sqrt(alpha_bar[s-1]) times the mean.
        let next = reverse_step(&x, &est.score, s, noise);
        for k in 0..2 {
            let expect = noise.alpha_bar_prev(s).sqrt() * est.mean[k];
            assert!((next[k] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn alive_fraction_grows_with_offset() {
    let world = ObstacleWorld2D::canonical(Difficulty::Hard).with_horizon(20).unwrap();
    let problem = ObstacleProblem::new(world, 0.01).unwrap();
    let x = vec![0.0; 40];
    for s in [20, 60, 98] {
        let mut previous = 0.0;
        for c_max in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let cfg = config(256, 100, Mode::EbMbd, c_max);
            let alive = mc_score(&problem, &x, s, &cfg).unwrap().stats.alive_fraction;
            assert!(
                alive >= previous,
                "s={s}: alive {alive} dropped below {previous} at c_max {c_max}"
            );
            previous = alive;
        }
    }
}

#[test]
fn barrier_is_inert_without_obstacles() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("open.json");
    std::fs::write(
        &world,
        r#"{"obstacles": [], "start": [0, 0], "target": [0, 7], "horizon": 12}"#,
    )
    .unwrap();
    let run = |algorithm| {
        let mut cfg = RunConfig {
            world: Some(world.clone()),
            algorithm,
            ..RunConfig::default()
        };
        cfg.schedule.steps = 40;
        cfg.sampler.samples = 64;
        cfg.resolve().unwrap().run_seed(3).unwrap()
    };
    let plain = run(Algorithm::Mbd);
    let barrier = run(Algorithm::Ebmbd);
    assert!(plain.feasible && barrier.feasible);
    for (a, b) in plain.actions.iter().zip(&barrier.actions) {
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }
    assert!((plain.final_cost - barrier.final_cost).abs() < 1e-7 * plain.final_cost);
}

#[test]
fn quadratic_solve_approaches_minimizer() {
    let problem = FnProblem::new(
        3,
        0.05,
        |x: &[f64]| x.iter().map(|v| (v - 1.0).powi(2)).sum(),
        |x: &[f64]| x[0] - 0.5,
    );
    // A light barrier weight: a heavy one rightly pulls x0 deep inside.
    for mode in [Mode::Mbd, Mode::EbMbd] {
        let sol = solve(&problem, &config_with_weight(512, 100, mode, 1.0, 1e-3)).unwrap();
        assert!(sol.is_feasible());
        for v in &sol.x {
            assert!((v - 1.0).abs() < 0.15, "{mode:?}: {:?}", sol.x);
        }
    }
}
