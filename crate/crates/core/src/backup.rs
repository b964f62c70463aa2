//! Value back-propagation along a stored trajectory.
//!
//! Every function here is pure. A trajectory of `n` steps is described by its
//! rewards `r_0..r_{n-1}` and a bootstrap vector `boot`, where `boot[t]` is the
//! critic's value for the state-action pair that follows step `t`:
//!
//! * `boot.len() == n - 1`: the episode ended in a true terminal state, so the
//!   value past the last step is zero.
//! * `boot.len() == n`: the episode was cut off (timeout) and `boot[n - 1]`
//!   bootstraps beyond the final step.
//!
//! Rollout lengths are counted in realized rewards. For step `t` the value of a
//! rollout of length `h >= 1` is
//!
//! ```text
//! V[t][0] = boot[t - 1]                       (the bootstrap seed)
//! V[t][h] = r_t + gamma * V[t + 1][h - 1]     (h >= 1)
//! ```
//!
//! and the backed-up target is the best rollout, `R_t = max_{1 <= h <= H_t} V[t][h]`,
//! where `H_t = min(d, n - t)`. Ties go to the shortest rollout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackupError {
    #[error("trajectory is empty")]
    Empty,
    #[error("bootstrap vector has length {got}, expected {} or {}", .rewards - 1, .rewards)]
    LengthMismatch { rewards: usize, got: usize },
    #[error("twin estimates differ in length ({q1} vs {q2})")]
    TwinLengthMismatch { q1: usize, q2: usize },
    #[error("rollout horizon must be at least 1")]
    ZeroHorizon,
    #[error("n-step length must be at least 1")]
    ZeroNStep,
}

/// Cap on the rollout length `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    Unlimited,
    Capped(usize),
}

impl Horizon {
    fn resolve(self, n: usize) -> Result<usize, BackupError> {
        match self {
            Horizon::Unlimited => Ok(n),
            Horizon::Capped(0) => Err(BackupError::ZeroHorizon),
            Horizon::Capped(d) => Ok(d.min(n)),
        }
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::Unlimited
    }
}

/// Bootstrap values `Q^(1)`, `Q^(2)` along a trajectory, laid out like `boot`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinEstimates {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

impl TwinEstimates {
    pub fn new(q1: Vec<f64>, q2: Vec<f64>) -> Result<Self, BackupError> {
        if q1.len() != q2.len() {
            return Err(BackupError::TwinLengthMismatch {
                q1: q1.len(),
                q2: q2.len(),
            });
        }
        Ok(Self { q1, q2 })
    }

    /// Both twins share the same estimates.
    pub fn identical(q: Vec<f64>) -> Self {
        Self {
            q2: q.clone(),
            q1: q,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            q1: self.q2.clone(),
            q2: self.q1.clone(),
        }
    }
}

fn check_lengths(rewards: &[f64], boot_len: usize) -> Result<(), BackupError> {
    let n = rewards.len();
    if n == 0 {
        return Err(BackupError::Empty);
    }
    if boot_len + 1 != n && boot_len != n {
        return Err(BackupError::LengthMismatch {
            rewards: n,
            got: boot_len,
        });
    }
    Ok(())
}

/// Value of the single rollout that runs to the end of the trajectory from its
/// last step: `r_{n-1}` on a terminal ending, `r_{n-1} + gamma * boot[n-1]` on a
/// bootstrapped one.
#[inline]
fn last_step(rewards: &[f64], boot: &[f64], gamma: f64) -> f64 {
    let last = rewards.len() - 1;
    match boot.get(last) {
        Some(&b) => rewards[last] + gamma * b,
        None => rewards[last],
    }
}

/// Recursive single-estimator backup:
/// `R_t = r_t + gamma * max(R_{t+1}, boot[t])`, `R_{n-1} = r_{n-1}`.
///
/// With a finite horizon the recursion from each `t` is restarted and forced to
/// bootstrap once it has consumed `d` rewards, which costs `O(n * d)`.
pub fn backup_single(
    rewards: &[f64],
    boot: &[f64],
    gamma: f64,
    horizon: Horizon,
) -> Result<Vec<f64>, BackupError> {
    check_lengths(rewards, boot.len())?;
    let n = rewards.len();
    let d = horizon.resolve(n)?;
    let mut out = vec![0.0; n];

    if d >= n {
        out[n - 1] = last_step(rewards, boot, gamma);
        for t in (0..n - 1).rev() {
            out[t] = rewards[t] + gamma * out[t + 1].max(boot[t]);
        }
        return Ok(out);
    }

    for (t, slot) in out.iter_mut().enumerate() {
        let end = (t + d - 1).min(n - 1);
        let mut acc = if end == n - 1 {
            last_step(rewards, boot, gamma)
        } else {
            rewards[end] + gamma * boot[end]
        };
        for j in (t..end).rev() {
            acc = rewards[j] + gamma * acc.max(boot[j]);
        }
        *slot = acc;
    }
    Ok(out)
}

/// The explicit rollout table `V[t][h]`.
///
/// Row `t` holds entries `0..=min(d, n - t)`. Entry `[t][0]` is the bootstrap
/// seed `boot[t - 1]`; the first step has no seed and stores `0.0` there, which
/// is never selected.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTable {
    pub values: Vec<Vec<f64>>,
    pub horizon_cap: usize,
}

impl RolloutTable {
    pub fn build(
        rewards: &[f64],
        seeds: &[f64],
        gamma: f64,
        horizon: Horizon,
    ) -> Result<Self, BackupError> {
        check_lengths(rewards, seeds.len())?;
        let n = rewards.len();
        let d = horizon.resolve(n)?;
        // Virtual row n: only its seed exists.
        let mut next: Vec<f64> = vec![seeds.get(n - 1).copied().unwrap_or(0.0)];
        let mut rows = vec![Vec::new(); n];
        for t in (0..n).rev() {
            let width = d.min(n - t);
            let seed = if t == 0 { 0.0 } else { seeds[t - 1] };
            let mut row = Vec::with_capacity(width + 1);
            row.push(seed);
            for h in 1..=width {
                row.push(rewards[t] + gamma * next[h - 1]);
            }
            rows[t] = row;
            next = rows[t].clone();
        }
        Ok(Self {
            values: rows,
            horizon_cap: d,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(argmax_{h >= 1} V[t][h], max value)`, smallest `h` on ties.
    pub fn best(&self, t: usize) -> (usize, f64) {
        let row = &self.values[t];
        let mut best_h = 1;
        let mut best_v = row[1];
        for (h, &v) in row.iter().enumerate().skip(2) {
            if v > best_v {
                best_v = v;
                best_h = h;
            }
        }
        (best_h, best_v)
    }
}

/// Table-based form of [`backup_single`]: returns the targets together with the
/// maximizing rollout length `h*_t` for every step.
pub fn backup_unrolled(
    rewards: &[f64],
    boot: &[f64],
    gamma: f64,
    horizon: Horizon,
) -> Result<(Vec<f64>, Vec<usize>), BackupError> {
    let table = RolloutTable::build(rewards, boot, gamma, horizon)?;
    let (hs, vs): (Vec<usize>, Vec<f64>) = (0..table.len()).map(|t| table.best(t)).unzip();
    Ok((vs, hs))
}

/// Twin back-propagation: twin `i` picks the rollout length with its own
/// estimates and the other twin scores that rollout.
///
/// Returns `(R^(1), R^(2))`.
pub fn backup_twin(
    rewards: &[f64],
    est: &TwinEstimates,
    gamma: f64,
    horizon: Horizon,
) -> Result<(Vec<f64>, Vec<f64>), BackupError> {
    if est.q1.len() != est.q2.len() {
        return Err(BackupError::TwinLengthMismatch {
            q1: est.q1.len(),
            q2: est.q2.len(),
        });
    }
    check_lengths(rewards, est.q1.len())?;
    let n = rewards.len();
    let d = horizon.resolve(n)?;
    let r1 = crossed(rewards, &est.q1, &est.q2, gamma, d);
    let r2 = crossed(rewards, &est.q2, &est.q1, gamma, d);
    Ok((r1, r2))
}

/// Selector/evaluator recursion. Carries, for the best rollout under
/// `select`, both its selector value and its value under `score`.
fn crossed(rewards: &[f64], select: &[f64], score: &[f64], gamma: f64, d: usize) -> Vec<f64> {
    let n = rewards.len();
    let tail = |j: usize| -> (f64, f64) {
        if j == n - 1 {
            (
                last_step(rewards, select, gamma),
                last_step(rewards, score, gamma),
            )
        } else {
            (
                rewards[j] + gamma * select[j],
                rewards[j] + gamma * score[j],
            )
        }
    };
    let step = |j: usize, (sel, eval): (f64, f64)| -> (f64, f64) {
        let short = rewards[j] + gamma * select[j];
        let long = rewards[j] + gamma * sel;
        if short >= long {
            (short, rewards[j] + gamma * score[j])
        } else {
            (long, rewards[j] + gamma * eval)
        }
    };

    let mut out = vec![0.0; n];
    if d >= n {
        let mut carry = tail(n - 1);
        out[n - 1] = carry.1;
        for t in (0..n - 1).rev() {
            carry = step(t, carry);
            out[t] = carry.1;
        }
        return out;
    }
    for (t, slot) in out.iter_mut().enumerate() {
        let end = (t + d - 1).min(n - 1);
        let mut carry = tail(end);
        for j in (t..end).rev() {
            carry = step(j, carry);
        }
        *slot = carry.1;
    }
    out
}

/// Fixed n-step target: `sum_{i<k} gamma^i r_{t+i} + gamma^k V[t+k][0]` with
/// `k = min(n, steps remaining)`.
pub fn backup_nstep(
    rewards: &[f64],
    boot: &[f64],
    gamma: f64,
    nstep: usize,
) -> Result<Vec<f64>, BackupError> {
    check_lengths(rewards, boot.len())?;
    if nstep == 0 {
        return Err(BackupError::ZeroNStep);
    }
    let n = rewards.len();
    Ok((0..n)
        .map(|t| {
            let end = (t + nstep - 1).min(n - 1);
            let mut acc = if end == n - 1 {
                last_step(rewards, boot, gamma)
            } else {
                rewards[end] + gamma * boot[end]
            };
            for j in (t..end).rev() {
                acc = rewards[j] + gamma * acc;
            }
            acc
        })
        .collect())
}

/// Clipped double estimate: the smaller of the two member networks.
#[inline]
pub fn clipped_q(qa: f64, qb: f64) -> f64 {
    qa.min(qb)
}

/// `(delta)_+^2 + alpha * (-delta)_+^2` with `delta = q - target`.
#[inline]
pub fn asymmetric_loss(q: f64, target: f64, alpha: f64) -> f64 {
    let delta = q - target;
    if delta > 0.0 {
        delta * delta
    } else {
        alpha * delta * delta
    }
}

/// Derivative of [`asymmetric_loss`] with respect to `q`.
#[inline]
pub fn asymmetric_loss_grad(q: f64, target: f64, alpha: f64) -> f64 {
    let delta = q - target;
    if delta > 0.0 {
        2.0 * delta
    } else {
        2.0 * alpha * delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct enumeration of every rollout length, written without recursion.
    fn enumerate(rewards: &[f64], seeds: &[f64], gamma: f64, d: usize) -> Vec<Vec<f64>> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                (1..=d.min(n - t))
                    .map(|h| {
                        let mut v = 0.0;
                        let mut disc = 1.0;
                        for i in 0..h {
                            v += disc * rewards[t + i];
                            disc *= gamma;
                        }
                        let seed = if t + h == n {
                            seeds.get(n - 1).copied().unwrap_or(0.0)
                        } else {
                            seeds[t + h - 1]
                        };
                        v + disc * seed
                    })
                    .collect()
            })
            .collect()
    }

    fn argmax_first(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn single_step_trajectory() {
        assert_eq!(
            backup_single(&[5.0], &[], 0.9, Horizon::Unlimited).unwrap(),
            vec![5.0]
        );
    }

    #[test]
    fn three_step_hand_unroll() {
        let r = backup_single(&[0.0, 0.0, 10.0], &[0.0, 0.0], 0.9, Horizon::Unlimited).unwrap();
        let expected = [8.1, 9.0, 10.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn counterfactual_branch_wins() {
        let r = backup_single(&[1.0, 1.0], &[100.0], 0.5, Horizon::Unlimited).unwrap();
        assert_eq!(r, vec![51.0, 1.0]);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        assert_eq!(
            backup_single(&[], &[], 0.9, Horizon::Unlimited),
            Err(BackupError::Empty)
        );
        assert!(matches!(
            backup_single(&[1.0, 2.0, 3.0], &[1.0], 0.9, Horizon::Unlimited),
            Err(BackupError::LengthMismatch { .. })
        ));
        assert_eq!(
            backup_single(&[1.0], &[], 0.9, Horizon::Capped(0)),
            Err(BackupError::ZeroHorizon)
        );
        assert!(TwinEstimates::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn unrolled_full_rollout_wins() {
        let (v, h) = backup_unrolled(&[0.0, 0.0, 10.0], &[0.0, 0.0], 0.9, Horizon::Unlimited).unwrap();
        // All three rewards are consumed from step 0.
        assert_eq!(h[0], 3);
        assert!((v[0] - 8.1).abs() < 1e-12);
        assert_eq!(h, vec![3, 2, 1]);
    }

    #[test]
    fn horizon_one_is_one_step_td() {
        let rewards = [1.0, -2.0, 0.5, 3.0];
        let boot = [4.0, 0.25, -1.0];
        let (v, h) = backup_unrolled(&rewards, &boot, 0.9, Horizon::Capped(1)).unwrap();
        assert!(h.iter().all(|&h| h == 1));
        for t in 0..3 {
            assert_eq!(v[t], rewards[t] + 0.9 * boot[t]);
        }
        assert_eq!(v[3], 3.0);
        let single = backup_single(&rewards, &boot, 0.9, Horizon::Capped(1)).unwrap();
        assert_eq!(single, v);
    }

    #[test]
    fn timeout_end_bootstraps_last_step() {
        let r = backup_single(&[1.0, 1.0], &[0.0, 10.0], 0.5, Horizon::Unlimited).unwrap();
        assert_eq!(r[1], 6.0);
        assert_eq!(r[0], 1.0 + 0.5 * 6.0);
    }

    #[test]
    fn twin_collapses_when_estimates_agree() {
        let rewards = [0.5, -1.0, 2.0, 0.0];
        let q = vec![3.0, -2.0, 1.0];
        let (r1, r2) =
            backup_twin(&rewards, &TwinEstimates::identical(q.clone()), 0.95, Horizon::Unlimited).unwrap();
        let single = backup_single(&rewards, &q, 0.95, Horizon::Unlimited).unwrap();
        assert_eq!(r1, single);
        assert_eq!(r2, single);
    }

    #[test]
    fn twin_scores_selection_with_other_estimator() {
        // Two steps with a bootstrapped end, so each twin carries two bootstrap
        // values: q1 = [0, 10] is optimistic about the state after the last step.
        let rewards = [0.0, 0.0];
        let est = TwinEstimates::new(vec![0.0, 10.0], vec![0.0, 0.0]).unwrap();
        let (r1, _) = backup_twin(&rewards, &est, 1.0, Horizon::Unlimited).unwrap();
        let single = backup_single(&rewards, &est.q1, 1.0, Horizon::Unlimited).unwrap();
        assert_eq!(single[0], 10.0);
        assert_eq!(r1[0], 0.0);
    }

    #[test]
    fn twin_matches_enumeration_with_cross_indexing() {
        let rewards = [1.0, 0.0, 2.0];
        let q1 = vec![5.0, -1.0];
        let q2 = vec![-3.0, 4.0];
        let gamma = 0.9;
        let v1 = enumerate(&rewards, &q1, gamma, 3);
        let v2 = enumerate(&rewards, &q2, gamma, 3);
        let (r1, r2) =
            backup_twin(&rewards, &TwinEstimates::new(q1, q2).unwrap(), gamma, Horizon::Unlimited).unwrap();
        for t in 0..3 {
            assert!((r1[t] - v2[t][argmax_first(&v1[t])]).abs() < 1e-12);
            assert!((r2[t] - v1[t][argmax_first(&v2[t])]).abs() < 1e-12);
        }
    }

    #[test]
    fn nstep_degenerate_cases() {
        let rewards = [1.0, 2.0, 3.0];
        let boot = [10.0, 20.0];
        let one = backup_nstep(&rewards, &boot, 0.5, 1).unwrap();
        assert_eq!(one, vec![6.0, 12.0, 3.0]);
        let mc = backup_nstep(&rewards, &[0.0, 0.0], 0.5, 3).unwrap();
        assert_eq!(mc, vec![1.0 + 0.5 * (2.0 + 0.5 * 3.0), 2.0 + 1.5, 3.0]);
        assert_eq!(backup_nstep(&rewards, &boot, 0.5, 0), Err(BackupError::ZeroNStep));
    }

    #[test]
    fn clipped_and_asymmetric_loss() {
        assert_eq!(clipped_q(3.0, 5.0), 3.0);
        assert_eq!(clipped_q(2.5, 2.5), 2.5);
        assert_eq!(asymmetric_loss(2.0, 2.0, 0.5), 0.0);
        assert_eq!(asymmetric_loss(3.0, 1.0, 0.5), 4.0);
        assert_eq!(asymmetric_loss(1.0, 3.0, 0.5), 2.0);
        assert_eq!(asymmetric_loss_grad(2.0, 2.0, 0.5), 0.0);
        assert_eq!(asymmetric_loss_grad(3.0, 1.0, 0.5), 4.0);
        assert_eq!(asymmetric_loss_grad(1.0, 3.0, 0.5), -2.0);
    }

    fn trajectory() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, bool)> {
        (1usize..30, any::<bool>()).prop_flat_map(|(n, timeout)| {
            let b = if timeout { n } else { n - 1 };
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-20.0f64..20.0, b),
                prop::collection::vec(-20.0f64..20.0, b),
                Just(timeout),
            )
        })
    }

    proptest! {
        #[test]
        fn single_equals_unrolled((rewards, boot, _, _) in trajectory(), gamma in 0.0f64..1.0, d in 1usize..40) {
            for horizon in [Horizon::Unlimited, Horizon::Capped(d)] {
                let a = backup_single(&rewards, &boot, gamma, horizon).unwrap();
                let (b, _) = backup_unrolled(&rewards, &boot, gamma, horizon).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn unrolled_matches_direct_enumeration((rewards, boot, _, _) in trajectory(), gamma in 0.0f64..1.0, d in 1usize..40) {
            let (v, h) = backup_unrolled(&rewards, &boot, gamma, Horizon::Capped(d)).unwrap();
            let table = enumerate(&rewards, &boot, gamma, d);
            for t in 0..rewards.len() {
                let best = table[t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!((v[t] - best).abs() <= 1e-10);
                prop_assert!((table[t][h[t] - 1] - best).abs() <= 1e-10);
            }
        }

        #[test]
        fn long_horizon_is_untruncated((rewards, boot, _, _) in trajectory(), gamma in 0.0f64..1.0, extra in 0usize..5) {
            let d = rewards.len() + extra;
            prop_assert_eq!(
                backup_single(&rewards, &boot, gamma, Horizon::Capped(d)).unwrap(),
                backup_single(&rewards, &boot, gamma, Horizon::Unlimited).unwrap()
            );
        }

        #[test]
        fn raising_a_bootstrap_never_lowers_earlier_targets(
            (rewards, boot, _, _) in trajectory(), gamma in 0.0f64..1.0, bump in 0.0f64..10.0, pick in any::<prop::sample::Index>()
        ) {
            prop_assume!(!boot.is_empty());
            let k = pick.index(boot.len());
            let before = backup_single(&rewards, &boot, gamma, Horizon::Unlimited).unwrap();
            let mut raised = boot.clone();
            raised[k] += bump;
            let after = backup_single(&rewards, &raised, gamma, Horizon::Unlimited).unwrap();
            for s in 0..=k.min(rewards.len() - 1) {
                prop_assert!(after[s] >= before[s]);
            }
        }

        #[test]
        fn twin_swap_symmetry((rewards, q1, q2, _) in trajectory(), gamma in 0.0f64..1.0, d in 1usize..40) {
            let est = TwinEstimates::new(q1, q2).unwrap();
            let (a1, a2) = backup_twin(&rewards, &est, gamma, Horizon::Capped(d)).unwrap();
            let (b1, b2) = backup_twin(&rewards, &est.swapped(), gamma, Horizon::Capped(d)).unwrap();
            prop_assert_eq!(a1, b2);
            prop_assert_eq!(a2, b1);
        }

        #[test]
        fn twin_matches_crossed_enumeration((rewards, q1, q2, _) in trajectory(), gamma in 0.0f64..1.0, d in 1usize..40) {
            let v1 = enumerate(&rewards, &q1, gamma, d);
            let v2 = enumerate(&rewards, &q2, gamma, d);
            let est = TwinEstimates::new(q1, q2).unwrap();
            let (r1, r2) = backup_twin(&rewards, &est, gamma, Horizon::Capped(d)).unwrap();
            for t in 0..rewards.len() {
                prop_assert!((r1[t] - v2[t][argmax_first(&v1[t])]).abs() <= 1e-9);
                prop_assert!((r2[t] - v1[t][argmax_first(&v2[t])]).abs() <= 1e-9);
            }
        }

        #[test]
        fn unit_alpha_is_squared_error(q in -100.0f64..100.0, target in -100.0f64..100.0) {
            prop_assert_eq!(asymmetric_loss(q, target, 1.0), (q - target) * (q - target));
        }
    }
}
