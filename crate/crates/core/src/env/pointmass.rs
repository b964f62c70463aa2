use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContinuousEnv, Environment, StepOutcome, TerminationKind};

pub const POINTMASS_DT: f64 = 0.1;
pub const POINTMASS_EPISODE_CAP: usize = 200;
/// Half-width of the square arena.
pub const POINTMASS_ARENA: f64 = 2.0;
const START_HALF_WIDTH: f64 = 1.0;
const BOUNDS: [(f64, f64); 2] = [(-1.0, 1.0), (-1.0, 1.0)];

/// Planar point mass steered toward the origin.
///
/// State is `[x, y, vx, vy]`, actions are forces in `[-1, 1]^2`. Dynamics are
/// a semi-implicit Euler double integrator:
///
/// ```text
/// v' = v + dt * a
/// p' = p + dt * v'
/// ```
///
/// The reward is the negative distance of `p'` to the goal. The arena is the
/// square `[-2, 2]^2` with inelastic walls: a coordinate that would leave it
/// stops at the wall and loses its velocity. Episodes start at rest from a
/// position uniform in `[-1, 1]^2` and always end by timeout.
#[derive(Debug, Clone)]
pub struct PointMass {
    rng: ChaCha8Rng,
    state: [f64; 4],
    goal: [f64; 2],
    steps: usize,
}

impl PointMass {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: [0.0; 4],
            goal: [0.0, 0.0],
            steps: 0,
        }
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    /// Place the mass at an explicit state and restart the step counter.
    pub fn reset_to(&mut self, state: [f64; 4]) -> Vec<f64> {
        self.state = state;
        self.steps = 0;
        state.to_vec()
    }

    /// `(worst, best)` bounds on an undiscounted episode return: the mass
    /// never leaves the arena, so no step costs more than its diagonal.
    pub fn return_bounds(&self) -> (f64, f64) {
        let worst_distance = POINTMASS_ARENA * std::f64::consts::SQRT_2;
        (-(POINTMASS_EPISODE_CAP as f64) * worst_distance, 0.0)
    }
}

/// Inelastic wall: a coordinate leaving the arena is stopped at its edge.
fn wall(pos: f64, vel: f64) -> (f64, f64) {
    if pos.abs() > POINTMASS_ARENA {
        (pos.clamp(-POINTMASS_ARENA, POINTMASS_ARENA), 0.0)
    } else {
        (pos, vel)
    }
}

impl Environment for PointMass {
    type State = Vec<f64>;
    type Action = Vec<f64>;

    fn reset(&mut self) -> Vec<f64> {
        let x = self.rng.random_range(-START_HALF_WIDTH..START_HALF_WIDTH);
        let y = self.rng.random_range(-START_HALF_WIDTH..START_HALF_WIDTH);
        self.reset_to([x, y, 0.0, 0.0])
    }

    fn step(&mut self, action: &Vec<f64>) -> StepOutcome<Vec<f64>> {
        let mut force = [action[0], action[1]];
        self.clamp_action(&mut force);
        let [x, y, vx, vy] = self.state;
        let vx = vx + POINTMASS_DT * force[0];
        let vy = vy + POINTMASS_DT * force[1];
        let (x, vx) = wall(x + POINTMASS_DT * vx, vx);
        let (y, vy) = wall(y + POINTMASS_DT * vy, vy);
        self.state = [x, y, vx, vy];
        self.steps += 1;
        let reward = -((x - self.goal[0]).powi(2) + (y - self.goal[1]).powi(2)).sqrt();
        let termination = if self.steps >= POINTMASS_EPISODE_CAP {
            TerminationKind::Timeout
        } else {
            TerminationKind::Running
        };
        StepOutcome {
            next_state: self.state.to_vec(),
            reward,
            termination,
        }
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

impl ContinuousEnv for PointMass {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> &[(f64, f64)] {
        &BOUNDS
    }

    fn episode_cap(&self) -> usize {
        POINTMASS_EPISODE_CAP
    }
}

/// Median undiscounted return of [`hand_policy`] over 1000 episodes from
/// `PointMass::new(123)`. Frozen here as the learning bar for trained agents.
pub const HAND_POLICY_MEDIAN_RETURN: f64 = -12.383608282083;

/// Reference controller for the point mass: unit-gain proportional-derivative
/// feedback toward the origin, `a = clip(-p - v)`.
pub fn hand_policy(state: &[f64]) -> Vec<f64> {
    vec![
        (-state[0] - state[2]).clamp(-1.0, 1.0),
        (-state[1] - state[3]).clamp(-1.0, 1.0),
    ]
}
