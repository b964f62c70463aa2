//! Monte Carlo measurement of estimation bias in the single and twin backups.
//!
//! A synthetic trajectory fixes the rewards and the true bootstrap values.
//! Each sample perturbs the bootstrap values with independent zero-mean noise
//! for each twin, backs both estimators up, and records the error against the
//! noiseless best-rollout value.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backup::{backup_single, backup_twin, BackupError, Horizon, TwinEstimates};
use crate::stats::RunningStats;

/// Samples drawn from one rng stream before moving to the next.
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("trajectory has {rewards} rewards but {values} true values")]
    Shape { rewards: usize, values: usize },
    #[error("non-finite trajectory entry at step {0}")]
    NonFinite(usize),
    #[error("noise scale must be finite and non-negative, got {0}")]
    Scale(f64),
    #[error("exhaustive enumeration supports two-point noise and at most {max} steps, got {got}")]
    Enumeration { max: usize, got: usize },
    #[error(transparent)]
    Backup(#[from] BackupError),
    #[error("csv: {0}")]
    Csv(String),
}

pub const MIN_SAMPLES: usize = 1000;
pub const MAX_ENUMERATED_STEPS: usize = 3;

/// Rewards and the true value that follows each step.
///
/// `true_q[t]` is the value of the state-action pair reached after step `t`;
/// the last entry bootstraps beyond the end of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrajectory {
    pub rewards: Vec<f64>,
    pub true_q: Vec<f64>,
    pub gamma: f64,
}

impl SyntheticTrajectory {
    pub fn new(rewards: Vec<f64>, true_q: Vec<f64>, gamma: f64) -> Result<Self, BiasError> {
        if rewards.is_empty() || rewards.len() != true_q.len() {
            return Err(BiasError::Shape {
                rewards: rewards.len(),
                values: true_q.len(),
            });
        }
        if let Some(t) = rewards.iter().zip(&true_q).position(|(r, q)| !r.is_finite() || !q.is_finite()) {
            return Err(BiasError::NonFinite(t));
        }
        Ok(Self { rewards, true_q, gamma })
    }

    /// All-zero rewards and values.
    pub fn flat(len: usize, gamma: f64) -> Self {
        Self {
            rewards: vec![0.0; len],
            true_q: vec![0.0; len],
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Five fixed trajectories covering flat, sparse, dense and spiky value shapes.
pub fn standard_trajectories() -> Vec<(&'static str, SyntheticTrajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let dense_r: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dense_q: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut spike_q = vec![0.5; 8];
    spike_q[4] = 25.0;
    vec![
        ("flat", SyntheticTrajectory::flat(10, 0.99)),
        ("sparse", SyntheticTrajectory::new(vec![0.0, 0.0, 10.0], vec![0.0; 3], 0.9).unwrap()),
        ("ramp", SyntheticTrajectory::new((0..6).map(f64::from).collect(), (0..6).map(|t| 6.0 - f64::from(t)).collect(), 0.95).unwrap()),
        ("dense", SyntheticTrajectory::new(dense_r, dense_q, 0.97).unwrap()),
        ("spike", SyntheticTrajectory::new(vec![-0.1; 8], spike_q, 0.9).unwrap()),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    /// Uniform on `[-sqrt(3), sqrt(3)]` before scaling.
    Uniform,
    /// `-1` or `+1` with equal probability before scaling.
    TwoPoint,
}

/// Zero-mean noise with standard deviation `sigma`.
///
/// Draws are `sigma * z` with `z` from a unit-variance family, so runs that
/// share a seed share `z` across scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn new(family: NoiseFamily, sigma: f64) -> Result<Self, BiasError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(BiasError::Scale(sigma));
        }
        Ok(Self { family, sigma })
    }

    pub fn gaussian(sigma: f64) -> Result<Self, BiasError> {
        Self::new(NoiseFamily::Gaussian, sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z = match self.family {
            NoiseFamily::Gaussian => StandardNormal.sample(rng),
            NoiseFamily::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
            NoiseFamily::TwoPoint => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        self.sigma * z
    }
}

/// Best noiseless rollout value from every step.
pub fn true_max_objective(traj: &SyntheticTrajectory) -> Result<Vec<f64>, BiasError> {
    Ok(backup_single(&traj.rewards, &traj.true_q, traj.gamma, Horizon::Unlimited)?)
}

/// Single-estimator and twin targets for one pair of noisy estimates.
fn targets(traj: &SyntheticTrajectory, q1: Vec<f64>, q2: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>), BiasError> {
    let single = backup_single(&traj.rewards, &q1, traj.gamma, Horizon::Unlimited)?;
    let (twin, _) = backup_twin(&traj.rewards, &TwinEstimates::new(q1, q2)?, traj.gamma, Horizon::Unlimited)?;
    Ok((single, twin))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepBias {
    pub step: usize,
    pub single_mean: f64,
    pub single_stderr: f64,
    pub twin_mean: f64,
    pub twin_stderr: f64,
}

impl StepBias {
    /// Twin mean bias is at most `k` standard errors above zero.
    pub fn twin_not_over(&self, k: f64) -> bool {
        self.twin_mean <= k * self.twin_stderr
    }

    /// Single-estimator mean bias is more than `k` standard errors above zero.
    pub fn single_over(&self, k: f64) -> bool {
        self.single_mean > k * self.single_stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub samples: usize,
    pub noise: NoiseModel,
    pub steps: Vec<StepBias>,
}

impl BiasReport {
    pub fn twin_not_over_everywhere(&self, k: f64) -> bool {
        self.steps.iter().all(|s| s.twin_not_over(k))
    }

    /// One row per step and estimator: `step,estimator,mean_bias,stderr,verdict`.
    /// The verdict tests "not above zero" for the twin rows and "above zero"
    /// for the single rows, both at three standard errors.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BiasError> {
        let err = |e: csv::Error| BiasError::Csv(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "estimator", "mean_bias", "stderr", "verdict"])
            .map_err(err)?;
        let verdict = |ok: bool| if ok { "pass" } else { "fail" };
        for s in &self.steps {
            out.write_record([
                s.step.to_string(),
                "single".into(),
                s.single_mean.to_string(),
                s.single_stderr.to_string(),
                verdict(s.single_over(3.0)).into(),
            ])
            .map_err(err)?;
            out.write_record([
                s.step.to_string(),
                "twin".into(),
                s.twin_mean.to_string(),
                s.twin_stderr.to_string(),
                verdict(s.twin_not_over(3.0)).into(),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| BiasError::Csv(e.to_string()))
    }
}

/// Runs `samples` noisy backups. Samples are split into fixed chunks, each
/// drawn from its own stream of a generator seeded from `rng`, and merged in
/// chunk order, so the report does not depend on the thread count.
pub fn run_bias_experiment<R: Rng + ?Sized>(
    traj: &SyntheticTrajectory,
    noise: NoiseModel,
    samples: usize,
    rng: &mut R,
) -> Result<BiasReport, BiasError> {
    run_seeded(traj, noise, samples, rng.random())
}

fn run_seeded(traj: &SyntheticTrajectory, noise: NoiseModel, samples: usize, seed: u64) -> Result<BiasReport, BiasError> {
    if samples < MIN_SAMPLES {
        return Err(BiasError::TooFewSamples {
            min: MIN_SAMPLES,
            got: samples,
        });
    }
    let truth = true_max_objective(traj)?;
    let n = traj.len();
    let chunks = samples.div_ceil(CHUNK);
    let partial = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut single = vec![RunningStats::new(); n];
            let mut twin = vec![RunningStats::new(); n];
            for _ in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let q1: Vec<f64> = traj.true_q.iter().map(|q| q + noise.sample(&mut rng)).collect();
                let q2: Vec<f64> = traj.true_q.iter().map(|q| q + noise.sample(&mut rng)).collect();
                let (s, t) = targets(traj, q1, q2)?;
                for i in 0..n {
                    single[i].push(s[i] - truth[i]);
                    twin[i].push(t[i] - truth[i]);
                }
            }
            Ok((single, twin))
        })
        .collect::<Result<Vec<_>, BiasError>>()?;
    let mut single = vec![RunningStats::new(); n];
    let mut twin = vec![RunningStats::new(); n];
    for (s, t) in &partial {
        for i in 0..n {
            single[i].merge(&s[i]);
            twin[i].merge(&t[i]);
        }
    }
    Ok(BiasReport {
        samples,
        noise,
        steps: (0..n)
            .map(|i| StepBias {
                step: i,
                single_mean: single[i].mean(),
                single_stderr: single[i].std_err(),
                twin_mean: twin[i].mean(),
                twin_stderr: twin[i].std_err(),
            })
            .collect(),
    })
}

/// Exact expected biases under two-point noise, by enumerating all `4^T`
/// sign patterns of the two noisy estimate vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactBias {
    pub cases: usize,
    pub single: Vec<f64>,
    pub twin: Vec<f64>,
}

pub fn exact_two_point_bias(traj: &SyntheticTrajectory, sigma: f64) -> Result<ExactBias, BiasError> {
    let n = traj.len();
    if n > MAX_ENUMERATED_STEPS {
        return Err(BiasError::Enumeration {
            max: MAX_ENUMERATED_STEPS,
            got: n,
        });
    }
    NoiseModel::new(NoiseFamily::TwoPoint, sigma)?;
    let truth = true_max_objective(traj)?;
    let cases = 1usize << (2 * n);
    let mut single = vec![0.0; n];
    let mut twin = vec![0.0; n];
    for mask in 0..cases {
        let sign = |bit: usize| if mask >> bit & 1 == 1 { sigma } else { -sigma };
        let q1 = (0..n).map(|i| traj.true_q[i] + sign(i)).collect();
        let q2 = (0..n).map(|i| traj.true_q[i] + sign(n + i)).collect();
        let (s, t) = targets(traj, q1, q2)?;
        for i in 0..n {
            single[i] += (s[i] - truth[i]) / cases as f64;
            twin[i] += (t[i] - truth[i]) / cases as f64;
        }
    }
    Ok(ExactBias { cases, single, twin })
}

/// Step-0 biases at one noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub single_bias: f64,
    pub single_stderr: f64,
    pub twin_bias: f64,
    pub twin_stderr: f64,
}

/// One experiment per scale, all from the same seed. Because draws are
/// `sigma * z`, every row sees the same `z` (common random numbers).
pub fn bias_sweep<R: Rng + ?Sized>(
    traj: &SyntheticTrajectory,
    family: NoiseFamily,
    sigmas: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<SweepRow>, BiasError> {
    let seed = rng.random();
    sigmas
        .iter()
        .map(|&sigma| {
            let report = run_seeded(traj, NoiseModel::new(family, sigma)?, samples, seed)?;
            let s = report.steps[0];
            Ok(SweepRow {
                sigma,
                single_bias: s.single_mean,
                single_stderr: s.single_stderr,
                twin_bias: s.twin_mean,
                twin_stderr: s.twin_stderr,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), BiasError> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| BiasError::Csv(e.to_string()))?;
    }
    out.flush().map_err(|e| BiasError::Csv(e.to_string()))
}
