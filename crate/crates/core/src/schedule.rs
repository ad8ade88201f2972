//! Noise and barrier schedules.
//!
//! Both schedules are indexed by the forward diffusion step `s ∈ 0..S`. The
//! reverse pass starts at `s = S - 1` and its last update is made at `s = 1`,
//! producing the state at index 0.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Smallest proposal standard deviation handed to the sampler.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Precomputed DDPM schedule: `beta`, `alpha = 1 - beta`, the running
/// product `alpha_bar`, and the Monte Carlo proposal std `sigma` with
/// `sigma[s]^2 = 1/sqrt(alpha_bar[s-1]) - 1` (and `alpha_bar[-1] := 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `beta` from `beta_start` to `beta_end` over `steps` entries.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("S", format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(invalid("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(invalid("beta_end", format!("{beta_end} not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(invalid(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }
        let span = (steps - 1) as f64;
        let beta = (0..steps)
            .map(|s| beta_start + (beta_end - beta_start) * s as f64 / span)
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..alpha.len())
            .map(|s| {
                let prev = if s == 0 { 1.0 } else { alpha_bar[s - 1] };
                (1.0 / prev.sqrt() - 1.0).max(0.0).sqrt().max(SIGMA_FLOOR)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    /// Number of schedule entries `S`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `alpha_bar[s - 1]`, with `alpha_bar[-1] = 1`.
    pub fn alpha_bar_prev(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bar[s - 1]
        }
    }
}

/// How the barrier hardness evolves over the reverse pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum MuPolicy {
    #[default]
    Constant,
    /// Linear decay in elapsed fraction from the initial `mu` down to `floor`.
    DecayToFloor { floor: f64 },
}

/// Per-step barrier hardness `mu[s]` and offset `c[s]`.
///
/// The offset follows `c(f) = c_max - c_max * f^kappa` where `f` is the
/// elapsed fraction of the reverse pass: `c = c_max` at the first reverse
/// update (`s = S - 1`) and `c = 0` at the last one (`s = 1`). `c[0]` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSchedule {
    mu: Vec<f64>,
    c: Vec<f64>,
    kappa: f64,
    c_max: f64,
    mu_policy: MuPolicy,
}

impl BarrierSchedule {
    pub fn new(kappa: f64, c_max: f64, mu: f64, steps: usize) -> Result<Self> {
        Self::with_policy(kappa, c_max, mu, steps, MuPolicy::Constant)
    }

    pub fn with_policy(
        kappa: f64,
        c_max: f64,
        mu: f64,
        steps: usize,
        mu_policy: MuPolicy,
    ) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(invalid("kappa", format!("must be positive, got {kappa}")));
        }
        if !(c_max >= 0.0 && c_max.is_finite()) {
            return Err(invalid("c_max", format!("must be non-negative, got {c_max}")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(invalid("mu", format!("must be positive, got {mu}")));
        }
        if steps < 2 {
            return Err(invalid("S", format!("need at least 2 steps, got {steps}")));
        }
        if let MuPolicy::DecayToFloor { floor } = mu_policy {
            if !(floor > 0.0 && floor <= mu) {
                return Err(invalid("mu_floor", format!("must be in (0, mu], got {floor}")));
            }
        }

        let mut c = Vec::with_capacity(steps);
        let mut mus = Vec::with_capacity(steps);
        for s in 0..steps {
            let f = elapsed_fraction(s, steps);
            c.push(offset_at(kappa, c_max, f));
            mus.push(match mu_policy {
                MuPolicy::Constant => mu,
                MuPolicy::DecayToFloor { floor } => floor + (mu - floor) * (1.0 - f),
            });
        }
        Ok(Self {
            mu: mus,
            c,
            kappa,
            c_max,
            mu_policy,
        })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn mu_policy(&self) -> MuPolicy {
        self.mu_policy
    }

    pub fn steps(&self) -> usize {
        self.c.len()
    }
}

/// Fraction of the reverse pass elapsed when the update at index `s` runs.
///
/// Index 0 is never updated from; it reports 1.
pub fn elapsed_fraction(s: usize, steps: usize) -> f64 {
    let first = steps - 1;
    if s == 0 || first <= 1 {
        return 1.0;
    }
    (first - s.min(first)) as f64 / (first - 1) as f64
}

/// `c_max - c_max * f^kappa`, clamped to `[0, c_max]`.
pub fn offset_at(kappa: f64, c_max: f64, f: f64) -> f64 {
    let f = f.clamp(0.0, 1.0);
    (c_max - c_max * f.powf(kappa)).clamp(0.0, c_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_schedule_endpoints() {
        let ns = NoiseSchedule::linear(1e-4, 0.02, 100).unwrap();
        assert_eq!(ns.beta()[0], 1e-4);
        assert!((ns.beta()[99] - 0.02).abs() < 1e-15);
        assert_eq!(ns.steps(), 100);
    }

    #[test]
    fn constant_schedule_collapses_to_power() {
        let b = 0.05;
        let ns = NoiseSchedule::linear(b, b, 20).unwrap();
        for s in 0..20 {
            assert_eq!(ns.alpha()[s], 1.0 - b);
            let expect = (1.0 - b).powi(s as i32 + 1);
            assert!((ns.alpha_bar()[s] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let ns = NoiseSchedule::linear(1e-4, 0.02, 100).unwrap();
        // independent product over the betas themselves
        let direct: f64 = ns.beta().iter().map(|b| 1.0 - b).product();
        assert!((ns.alpha_bar()[99] - direct).abs() < 1e-15);
    }

    #[test]
    fn sigma_matches_formula_and_floor() {
        let ns = NoiseSchedule::linear(1e-4, 0.02, 50).unwrap();
        assert_eq!(ns.sigma()[0], SIGMA_FLOOR);
        for s in 1..50 {
            let expect = 1.0 / ns.alpha_bar()[s - 1].sqrt() - 1.0;
            assert!(expect > 0.0);
            assert!((ns.sigma()[s].powi(2) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_noise_parameters() {
        assert!(NoiseSchedule::linear(1e-4, 0.02, 1).is_err());
        assert!(NoiseSchedule::linear(0.0, 0.02, 10).is_err());
        assert!(NoiseSchedule::linear(1e-4, 1.0, 10).is_err());
        assert!(NoiseSchedule::linear(0.03, 0.02, 10).is_err());
    }

    #[test]
    fn offset_examples() {
        assert_eq!(offset_at(1.0, 2.0, 0.5), 1.0);
        assert_eq!(offset_at(3.0, 1.0, 0.5), 0.875);
        for kappa in [0.3, 1.0, 4.0, 50.0] {
            assert_eq!(offset_at(kappa, 1.7, 1.0), 0.0);
            assert_eq!(offset_at(kappa, 1.7, 0.0), 1.7);
        }
    }

    #[test]
    fn barrier_schedule_endpoints() {
        let steps = 30;
        let bs = BarrierSchedule::new(2.0, 1.5, 0.5, steps).unwrap();
        assert_eq!(bs.c()[steps - 1], 1.5);
        assert_eq!(bs.c()[1], 0.0);
        assert_eq!(bs.c()[0], 0.0);
        assert!(bs.mu().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn decaying_mu_reaches_floor() {
        let bs =
            BarrierSchedule::with_policy(1.0, 1.0, 2.0, 11, MuPolicy::DecayToFloor { floor: 0.1 })
                .unwrap();
        assert_eq!(bs.mu()[10], 2.0);
        assert!((bs.mu()[1] - 0.1).abs() < 1e-15);
        assert!(bs.mu().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn rejects_bad_barrier_parameters() {
        assert!(BarrierSchedule::new(0.0, 1.0, 1.0, 10).is_err());
        assert!(BarrierSchedule::new(-1.0, 1.0, 1.0, 10).is_err());
        assert!(BarrierSchedule::new(1.0, 1.0, 0.0, 10).is_err());
        assert!(BarrierSchedule::new(1.0, -1.0, 1.0, 10).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_is_running_product(b0 in 1e-5f64..0.05, span in 0.0f64..0.1, steps in 2usize..300) {
            let ns = NoiseSchedule::linear(b0, b0 + span, steps).unwrap();
            for s in 1..steps {
                prop_assert_eq!(ns.alpha_bar()[s], ns.alpha_bar()[s - 1] * ns.alpha()[s]);
                prop_assert!(ns.alpha_bar()[s] < ns.alpha_bar()[s - 1]);
                prop_assert!(ns.beta()[s] >= ns.beta()[s - 1]);
            }
            prop_assert!(ns.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        }

        #[test]
        fn offset_monotone_in_elapsed_fraction(kappa in 0.05f64..20.0, c_max in 0.0f64..10.0, steps in 3usize..200) {
            let bs = BarrierSchedule::new(kappa, c_max, 1.0, steps).unwrap();
            // reverse order of indices is elapsed order
            for s in 1..steps - 1 {
                prop_assert!(bs.c()[s] <= bs.c()[s + 1]);
            }
            prop_assert!(bs.c().iter().all(|&c| (0.0..=c_max).contains(&c)));
            prop_assert_eq!(bs.c()[steps - 1], c_max);
            prop_assert_eq!(bs.c()[1], 0.0);
        }

        #[test]
        fn larger_kappa_keeps_offset_larger(ka in 0.05f64..20.0, kb in 0.05f64..20.0, f in 0.0f64..=1.0) {
            let (hi, lo) = if ka >= kb { (ka, kb) } else { (kb, ka) };
            prop_assert!(offset_at(hi, 2.0, f) >= offset_at(lo, 2.0, f));
        }
    }
}
