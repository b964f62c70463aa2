use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContinuousEnv, Environment, StepOutcome};

/// Repeats the previous action with probability `sticky_prob`.
///
/// The wrapper draws one uniform per step from its own stream, so with
/// `sticky_prob == 0` the inner environment sees exactly the chosen actions.
#[derive(Debug, Clone)]
pub struct StickyActions<E: Environment> {
    inner: E,
    sticky_prob: f64,
    rng: ChaCha8Rng,
    previous: Option<E::Action>,
}

impl<E: Environment> StickyActions<E> {
    pub fn new(inner: E, sticky_prob: f64, seed: u64) -> Self {
        assert!(
            (0.0..1.0).contains(&sticky_prob),
            "sticky_prob must lie in [0, 1), got {sticky_prob}"
        );
        Self {
            inner,
            sticky_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
            previous: None,
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn sticky_prob(&self) -> f64 {
        self.sticky_prob
    }
}

impl<E: Environment> Environment for StickyActions<E> {
    type State = E::State;
    type Action = E::Action;

    fn reset(&mut self) -> E::State {
        self.previous = None;
        self.inner.reset()
    }

    fn step(&mut self, action: &E::Action) -> StepOutcome<E::State> {
        let u: f64 = self.rng.random();
        let executed = match &self.previous {
            Some(prev) if u < self.sticky_prob => prev.clone(),
            _ => action.clone(),
        };
        let out = self.inner.step(&executed);
        self.previous = Some(executed);
        out
    }

    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed);
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5713_C4A5_0000_0001);
    }
}

impl<E: ContinuousEnv> ContinuousEnv for StickyActions<E> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn action_bounds(&self) -> &[(f64, f64)] {
        self.inner.action_bounds()
    }

    fn episode_cap(&self) -> usize {
        self.inner.episode_cap()
    }
}
