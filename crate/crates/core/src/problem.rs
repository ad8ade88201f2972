//! Optimization problems: the generic cost/constraint interface and the
//! 2D circular-obstacle navigation task.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Cost and constraint values of one decision vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    /// Signed constraint value; feasible when `>= 0`.
    pub constraint: f64,
}

/// A constrained minimization problem `min J(x) s.t. g(x) >= 0` sampled at
/// temperature `lambda`. Implementations must be pure.
pub trait Problem: Sync {
    fn dim(&self) -> usize;

    fn temperature(&self) -> f64;

    fn evaluate(&self, x: &[f64]) -> Evaluation;

    fn cost(&self, x: &[f64]) -> f64 {
        self.evaluate(x).cost
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        self.evaluate(x).constraint
    }

    /// Components whose minimum is `constraint(x)`. Derivative-based solvers
    /// use them to avoid the kinks of the minimum.
    fn constraint_terms(&self, x: &[f64]) -> Vec<f64> {
        vec![self.constraint(x)]
    }
}

/// Problem assembled from two closures. Mostly useful for synthetic tests.
pub struct FnProblem<C, G> {
    dim: usize,
    temperature: f64,
    cost: C,
    constraint: G,
}

impl<C, G> FnProblem<C, G>
where
    C: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, temperature: f64, cost: C, constraint: G) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            dim,
            temperature,
            cost,
            constraint,
        }
    }
}

impl<C, G> Problem for FnProblem<C, G>
where
    C: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        Evaluation {
            cost: (self.cost)(x),
            constraint: (self.constraint)(x),
        }
    }
}

pub type Vec2 = [f64; 2];

/// Maximum displacement of a single step.
pub const STEP_SCALE: f64 = 0.3;
/// Gain inside the step-length sigmoid.
pub const STEP_GAIN: f64 = 0.1;
pub const TERMINAL_WEIGHT: f64 = 20.0;
pub const ACTION_WEIGHT: f64 = 0.1;
/// Actions with norm below this produce no displacement.
pub const ZERO_ACTION_NORM: f64 = 1e-9;
/// Signed distance reported by a world with no obstacles.
pub const NO_OBSTACLE_DISTANCE: f64 = 1e9;

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

impl Circle {
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        norm(sub(p, self.center)) - self.radius
    }
}

/// A planar world of circular obstacles with a start, a target and a
/// horizon (number of actions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct ObstacleWorld2D {
    obstacles: Vec<Circle>,
    start: Vec2,
    target: Vec2,
    horizon: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    obstacles: Vec<[f64; 3]>,
    start: Vec2,
    target: Vec2,
    #[serde(default = "default_horizon")]
    horizon: usize,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

impl TryFrom<WorldFile> for ObstacleWorld2D {
    type Error = Error;

    fn try_from(f: WorldFile) -> Result<Self> {
        let obstacles = f
            .obstacles
            .iter()
            .map(|&[cx, cy, r]| Circle {
                center: [cx, cy],
                radius: r,
            })
            .collect();
        ObstacleWorld2D::new(obstacles, f.start, f.target, f.horizon)
    }
}

impl From<ObstacleWorld2D> for WorldFile {
    fn from(w: ObstacleWorld2D) -> Self {
        WorldFile {
            obstacles: w
                .obstacles
                .iter()
                .map(|o| [o.center[0], o.center[1], o.radius])
                .collect(),
            start: w.start,
            target: w.target,
            horizon: w.horizon,
        }
    }
}

impl std::str::FromStr for ObstacleWorld2D {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Obstacle centers and base radii of the canonical world: a row flanking
/// the start, then two staggered rows between start and target with the
/// middle row blocking the straight line.
const CANONICAL_OBSTACLES: [[f64; 3]; 13] = [
    [-2.85, 0.0, 0.6],
    [-0.95, 0.0, 0.6],
    [0.95, 0.0, 0.6],
    [2.85, 0.0, 0.6],
    [-3.8, 2.5, 0.6],
    [-1.9, 2.5, 0.6],
    [0.0, 2.5, 0.6],
    [1.9, 2.5, 0.6],
    [3.8, 2.5, 0.6],
    [-2.85, 5.0, 0.6],
    [-0.95, 5.0, 0.6],
    [0.95, 5.0, 0.6],
    [2.85, 5.0, 0.6],
];
const CANONICAL_START: Vec2 = [0.0, 0.0];
const CANONICAL_TARGET: Vec2 = [0.0, 7.0];
/// Radius multiplier of the hard preset; row gaps shrink from 0.7 to 0.22.
pub const HARD_RADIUS_SCALE: f64 = 1.4;

impl ObstacleWorld2D {
    pub fn new(obstacles: Vec<Circle>, start: Vec2, target: Vec2, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        for (i, o) in obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(invalid("obstacles", format!("obstacle {i} has radius {}", o.radius)));
            }
            if !(o.center[0].is_finite() && o.center[1].is_finite()) {
                return Err(invalid("obstacles", format!("obstacle {i} has a non-finite center")));
            }
        }
        let world = Self {
            obstacles,
            start,
            target,
            horizon,
        };
        if world.sdf(start) <= 0.0 {
            return Err(invalid("start", "lies inside an obstacle"));
        }
        if world.sdf(target) <= 0.0 {
            return Err(invalid("target", "lies inside an obstacle"));
        }
        Ok(world)
    }

    /// Fixed layout of staggered discs between start and target.
    /// The hard preset keeps the centers and scales every radius so the
    /// passages nearly close.
    pub fn canonical(difficulty: Difficulty) -> Self {
        let scale = match difficulty {
            Difficulty::Easy => 1.0,
            Difficulty::Hard => HARD_RADIUS_SCALE,
        };
        let obstacles = CANONICAL_OBSTACLES
            .iter()
            .map(|&[cx, cy, r]| Circle {
                center: [cx, cy],
                radius: r * scale,
            })
            .collect();
        Self::new(obstacles, CANONICAL_START, CANONICAL_TARGET, DEFAULT_HORIZON)
            .expect("canonical world is valid")
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn obstacles(&self) -> &[Circle] {
        &self.obstacles
    }

    pub fn start(&self) -> Vec2 {
        self.start
    }

    pub fn target(&self) -> Vec2 {
        self.target
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Decision-vector length (`2 * horizon`).
    pub fn dim(&self) -> usize {
        2 * self.horizon
    }

    pub fn max_radius(&self) -> f64 {
        self.obstacles.iter().map(|o| o.radius).fold(0.0, f64::max)
    }

    /// Signed distance to the closest obstacle; negative inside one.
    pub fn sdf(&self, p: Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(p))
            .fold(NO_OBSTACLE_DISTANCE, f64::min)
    }

    /// Rolls `actions` (flattened `[u0x, u0y, u1x, ...]`) out from the start.
    pub fn rollout(&self, actions: &[f64]) -> Result<Trajectory> {
        if actions.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: actions.len(),
            });
        }
        let actions: Vec<Vec2> = actions.chunks_exact(2).map(|u| [u[0], u[1]]).collect();
        let mut states = Vec::with_capacity(actions.len() + 1);
        let mut xi = self.start;
        states.push(xi);
        for &u in &actions {
            xi = step(xi, u);
            states.push(xi);
        }
        let mut traj = Trajectory {
            actions,
            states,
            total_cost: 0.0,
            min_clearance: 0.0,
        };
        traj.total_cost = self.trajectory_cost(&traj);
        traj.min_clearance = self.trajectory_constraint(&traj);
        Ok(traj)
    }

    /// `20 |xi_T - target| + sum_t (|xi_t - target| + 0.1 |u_t|)`, summed over
    /// the action indices.
    pub fn trajectory_cost(&self, traj: &Trajectory) -> f64 {
        let terminal = traj.states.last().copied().unwrap_or(self.start);
        let running: f64 = traj
            .actions
            .iter()
            .zip(&traj.states)
            .map(|(&u, &xi)| norm(sub(xi, self.target)) + ACTION_WEIGHT * norm(u))
            .sum();
        TERMINAL_WEIGHT * norm(sub(terminal, self.target)) + running
    }

    /// Minimum signed distance over every state of the trajectory.
    pub fn trajectory_constraint(&self, traj: &Trajectory) -> f64 {
        traj.states
            .iter()
            .map(|&p| self.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed distance of every state of the rollout, start first.
    pub fn state_clearances(&self, actions: &[f64]) -> Vec<f64> {
        debug_assert_eq!(actions.len(), self.dim());
        let mut xi = self.start;
        let mut out = Vec::with_capacity(self.horizon + 1);
        out.push(self.sdf(xi));
        for u in actions.chunks_exact(2) {
            xi = step(xi, [u[0], u[1]]);
            out.push(self.sdf(xi));
        }
        out
    }

    /// Allocation-free rollout computing cost and clearance together.
    pub fn evaluate_actions(&self, actions: &[f64]) -> Evaluation {
        debug_assert_eq!(actions.len(), self.dim());
        let mut xi = self.start;
        let mut cost = 0.0;
        let mut clearance = self.sdf(xi);
        for u in actions.chunks_exact(2) {
            let u = [u[0], u[1]];
            cost += norm(sub(xi, self.target)) + ACTION_WEIGHT * norm(u);
            xi = step(xi, u);
            clearance = clearance.min(self.sdf(xi));
        }
        cost += TERMINAL_WEIGHT * norm(sub(xi, self.target));
        Evaluation {
            cost,
            constraint: clearance,
        }
    }
}

/// `xi + 0.3 sigmoid(0.1 |u|) u / |u|`; zero displacement for `|u| < 1e-9`.
pub fn step(xi: Vec2, u: Vec2) -> Vec2 {
    let n = norm(u);
    if n < ZERO_ACTION_NORM {
        return xi;
    }
    let len = STEP_SCALE * sigmoid(STEP_GAIN * n);
    [xi[0] + len * u[0] / n, xi[1] + len * u[1] / n]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

/// Rolled-out action sequence. `states` has one more entry than `actions`;
/// the last state is the terminal one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<Vec2>,
    pub states: Vec<Vec2>,
    pub total_cost: f64,
    pub min_clearance: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> Vec2 {
        *self.states.last().expect("trajectory has at least the start state")
    }

    pub fn is_feasible(&self) -> bool {
        self.min_clearance >= 0.0
    }
}

/// The navigation task as a [`Problem`] over flattened action vectors.
#[derive(Debug, Clone)]
pub struct ObstacleProblem {
    world: ObstacleWorld2D,
    temperature: f64,
}

impl ObstacleProblem {
    pub fn new(world: ObstacleWorld2D, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid("temperature", format!("must be positive, got {temperature}")));
        }
        Ok(Self { world, temperature })
    }

    pub fn world(&self) -> &ObstacleWorld2D {
        &self.world
    }
}

impl Problem for ObstacleProblem {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        self.world.evaluate_actions(x)
    }

    /// One clearance per state, start included.
    fn constraint_terms(&self, x: &[f64]) -> Vec<f64> {
        self.world.state_clearances(x)
    }
}
