//! Shared fixtures for the benchmarks.

use gem_core::agent::{GemAgent, HyperParams, Variant};
use gem_core::backup::TwinEstimates;
use gem_core::env::PointMass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rewards and twin bootstrap values for a timeout-ended trajectory of `n` steps.
pub fn trajectory(n: usize, seed: u64) -> (Vec<f64>, TwinEstimates) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
    let mut values = || (0..n).map(|_| rng.random_range(-60.0..0.0)).collect::<Vec<f64>>();
    let (q1, q2) = (values(), values());
    (rewards, TwinEstimates::new(q1, q2).expect("equal lengths"))
}

/// A point-mass agent that has finished warmup, so every further step trains.
pub fn warm_agent(seed: u64) -> (GemAgent, PointMass) {
    let mut env = PointMass::new(seed);
    let hp = HyperParams::default();
    let warmup = hp.warmup_steps;
    let mut agent = GemAgent::for_env(&env, hp, Variant::Gem, seed).expect("valid defaults");
    for _ in 0..warmup {
        agent.train_step(&mut env).expect("warmup step");
    }
    (agent, env)
}

/// Uniform random rows for network inputs.
pub fn batch(rows: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect()
}
