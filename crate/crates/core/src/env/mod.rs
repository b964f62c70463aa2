//! Environments: finite MDPs with exact solvers, a continuous point-mass task,
//! and a sticky-action wrapper.

mod finite;
mod pointmass;
mod registry;
mod sticky;

pub use finite::{
    bellman_residual, make_bandit_mu, make_chain, make_gridworld, make_random_mdp, policy_evaluation,
    q_max_exact, value_iteration, FiniteEnv, FiniteMdp, MdpError, QTable, VALUE_ITERATION_CAP,
};
pub use pointmass::{hand_policy, PointMass, HAND_POLICY_MEDIAN_RETURN, POINTMASS_ARENA, POINTMASS_DT, POINTMASS_EPISODE_CAP};
pub use registry::{EnvId, UnknownEnv};
pub use sticky::StickyActions;

use serde::{Deserialize, Serialize};

/// How a step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminationKind {
    Running,
    /// True episode end; nothing to bootstrap from.
    Terminal,
    /// Episode cap reached; the next state still has value.
    Timeout,
}

impl TerminationKind {
    pub fn is_done(self) -> bool {
        !matches!(self, TerminationKind::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationKind::Running => "running",
            TerminationKind::Terminal => "terminal",
            TerminationKind::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub reward: f64,
    pub termination: TerminationKind,
}

pub trait Environment {
    type State: Clone;
    type Action: Clone;

    fn reset(&mut self) -> Self::State;
    fn step(&mut self, action: &Self::Action) -> StepOutcome<Self::State>;
    /// Re-seed every internal random stream.
    fn reseed(&mut self, seed: u64);
}

/// Vector-valued environment with box-bounded actions.
pub trait ContinuousEnv: Environment<State = Vec<f64>, Action = Vec<f64>> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> &[(f64, f64)];
    fn episode_cap(&self) -> usize;

    fn clamp_action(&self, action: &mut [f64]) {
        for (a, &(lo, hi)) in action.iter_mut().zip(self.action_bounds()) {
            *a = a.clamp(lo, hi);
        }
    }
}

/// Undiscounted return of each of `episodes` rollouts of `policy`.
pub fn rollout_returns<E, P>(env: &mut E, episodes: usize, mut policy: P) -> Vec<f64>
where
    E: Environment,
    P: FnMut(&E::State) -> E::Action,
{
    (0..episodes)
        .map(|_| {
            let mut state = env.reset();
            let mut total = 0.0;
            loop {
                let action = policy(&state);
                let out = env.step(&action);
                total += out.reward;
                if out.termination.is_done() {
                    break total;
                }
                state = out.next_state;
            }
        })
        .collect()
}
