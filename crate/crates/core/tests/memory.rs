use std::cell::RefCell;

use gem_core::approx::NetError;
use gem_core::backup::Horizon;
use gem_core::env::TerminationKind;
use gem_core::memory::{EpisodicMemory, MemoryError, RefreshParams, TargetModel, TargetRule, Transition};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// States and actions are 1-D. The target policy is `a = 0.5 s` and the
/// twin values are arbitrary functions of the scalar state.
struct Mock {
    q1: fn(f64) -> f64,
    q2: fn(f64) -> f64,
    seen: RefCell<Vec<f64>>,
}

impl Mock {
    fn new(q1: fn(f64) -> f64, q2: fn(f64) -> f64) -> Self {
        Self {
            q1,
            q2,
            seen: RefCell::new(Vec::new()),
        }
    }
}

impl TargetModel for Mock {
    fn action_bounds(&self) -> &[(f64, f64)] {
        &[(-1000.0, 1000.0)]
    }

    fn target_actions(&self, states: &[f64], _batch: usize) -> Result<Vec<f64>, NetError> {
        Ok(states.iter().map(|s| 0.5 * s).collect())
    }

    fn target_values(&self, states: &[f64], actions: &[f64], _batch: usize) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        self.seen.borrow_mut().extend_from_slice(actions);
        Ok((
            states.iter().map(|&s| (self.q1)(s)).collect(),
            states.iter().map(|&s| (self.q2)(s)).collect(),
        ))
    }
}

fn params(gamma: f64, rule: TargetRule) -> RefreshParams {
    RefreshParams {
        gamma,
        horizon: Horizon::Unlimited,
        noise_sigma: 0.0,
        noise_clip: 0.0,
        rule,
        max_trajectories: None,
    }
}

/// Steps through states 0, 1, 2, ... with the given rewards.
fn push_episode(mem: &mut EpisodicMemory, start: f64, rewards: &[f64], end: TerminationKind) {
    mem.begin_episode().unwrap();
    for (i, &r) in rewards.iter().enumerate() {
        let s = start + i as f64;
        let termination = if i + 1 == rewards.len() { end } else { TerminationKind::Running };
        mem.append_step(Transition {
            state: vec![s],
            action: vec![0.0],
            reward: r,
            next_state: vec![s + 1.0],
            termination,
        })
        .unwrap();
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

/// Direct enumeration of every rollout length, with twin `sel` choosing and
/// twin `eval` scoring.
fn enumerate_crossed(rewards: &[f64], sel: &[f64], eval: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let value = |t: usize, h: usize, boot: &[f64]| {
        let mut v = 0.0;
        for k in 0..h {
            v += gamma.powi(k as i32) * rewards[t + k];
        }
        let b = boot.get(t + h - 1).copied().unwrap_or(0.0);
        v + gamma.powi(h as i32) * b
    };
    (0..n)
        .map(|t| {
            let mut best_h = 1;
            for h in 2..=n - t {
                if value(t, h, sel) > value(t, best_h, sel) {
                    best_h = h;
                }
            }
            value(t, best_h, eval)
        })
        .collect()
}

#[test]
fn first_step_opens_a_trajectory() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    mem.append_step(Transition {
        state: vec![0.0],
        action: vec![0.0],
        reward: 1.0,
        next_state: vec![1.0],
        termination: TerminationKind::Running,
    })
    .unwrap();
    assert_eq!(mem.num_trajectories(), 1);
    assert_eq!(mem.trajectory(0).unwrap().len(), 1);
    assert!(!mem.trajectory(0).unwrap().is_sealed());
}

#[test]
fn eviction_drops_whole_oldest_trajectories() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    for k in 0..3 {
        push_episode(&mut mem, 10.0 * k as f64, &[1.0; 4], TerminationKind::Terminal);
    }
    assert_eq!(mem.total_transitions(), 8);
    assert_eq!(mem.num_trajectories(), 2);
    assert_eq!(mem.trajectory(0).unwrap().transitions()[0].state, vec![10.0]);
}

#[test]
fn appending_after_seal_needs_a_new_episode() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[1.0], TerminationKind::Terminal);
    let t = Transition {
        state: vec![5.0],
        action: vec![0.0],
        reward: 0.0,
        next_state: vec![6.0],
        termination: TerminationKind::Running,
    };
    assert!(matches!(mem.append_step(t.clone()), Err(MemoryError::AppendAfterSeal)));
    mem.begin_episode().unwrap();
    mem.append_step(t).unwrap();
    assert!(matches!(mem.begin_episode(), Err(MemoryError::EpisodeOpen(1))));
}

#[test]
fn discontinuous_and_malformed_steps_are_rejected() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[1.0, 1.0], TerminationKind::Running);
    let jump = Transition {
        state: vec![9.0],
        action: vec![0.0],
        reward: 0.0,
        next_state: vec![10.0],
        termination: TerminationKind::Running,
    };
    assert!(matches!(mem.append_step(jump), Err(MemoryError::Discontinuous)));
    let wide = Transition {
        state: vec![2.0, 0.0],
        action: vec![0.0],
        reward: 0.0,
        next_state: vec![3.0, 0.0],
        termination: TerminationKind::Running,
    };
    assert!(matches!(mem.append_step(wide), Err(MemoryError::Dimension { .. })));
    let nan = Transition {
        state: vec![2.0],
        action: vec![0.0],
        reward: f64::NAN,
        next_state: vec![3.0],
        termination: TerminationKind::Running,
    };
    assert!(matches!(mem.append_step(nan), Err(MemoryError::NonFiniteReward(_))));
    assert!(matches!(EpisodicMemory::new(0), Err(MemoryError::ZeroCapacity)));
}

#[test]
fn single_step_trajectory_targets_its_reward() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[3.0], TerminationKind::Terminal);
    mem.refresh_targets(&Mock::new(|_| 50.0, |_| -50.0), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    let (r1, r2) = mem.trajectory(0).unwrap().targets().unwrap();
    assert_eq!((r1, r2), (&[3.0][..], &[3.0][..]));
}

#[test]
fn three_step_targets_match_enumeration() {
    let rewards = [1.0, -2.0, 0.5];
    let q1 = |s: f64| [0.0, 4.0, -1.0, 0.0][s as usize];
    let q2 = |s: f64| [0.0, 1.0, 3.0, 0.0][s as usize];
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &rewards, TerminationKind::Terminal);
    let gamma = 0.8;
    mem.refresh_targets(&Mock::new(q1, q2), &params(gamma, TargetRule::Twin), &mut rng())
        .unwrap();
    // Bootstraps sit at the next states 1 and 2.
    let b1 = [4.0, -1.0];
    let b2 = [1.0, 3.0];
    let (r1, r2) = mem.trajectory(0).unwrap().targets().unwrap();
    let e1 = enumerate_crossed(&rewards, &b1, &b2, gamma);
    let e2 = enumerate_crossed(&rewards, &b2, &b1, gamma);
    for t in 0..3 {
        assert!((r1[t] - e1[t]).abs() < 1e-10, "R1[{t}] {} vs {}", r1[t], e1[t]);
        assert!((r2[t] - e2[t]).abs() < 1e-10, "R2[{t}] {} vs {}", r2[t], e2[t]);
    }
}

#[test]
fn timeout_bootstraps_past_the_last_step() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[0.0, 0.0], TerminationKind::Timeout);
    mem.refresh_targets(&Mock::new(|s| 10.0 * s, |s| 10.0 * s), &params(0.5, TargetRule::Twin), &mut rng())
        .unwrap();
    let (r1, _) = mem.trajectory(0).unwrap().targets().unwrap();
    // Last step: 0 + 0.5 * q(2) = 10; first: max(0.5 * q(1), 0.5 * 10) = 5.
    assert_eq!(r1, &[5.0, 10.0]);
}

#[test]
fn open_trajectories_are_not_refreshed() {
    let mut mem = EpisodicMemory::new(20).unwrap();
    push_episode(&mut mem, 0.0, &[1.0, 1.0], TerminationKind::Terminal);
    push_episode(&mut mem, 10.0, &[1.0, 1.0], TerminationKind::Running);
    let stats = mem
        .refresh_targets(&Mock::new(|_| 0.0, |_| 0.0), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    assert_eq!((stats.trajectories, stats.transitions), (1, 2));
    assert!(mem.trajectory(1).unwrap().targets().is_none());
    assert_eq!(mem.refreshed_transitions(), 2);
}

#[test]
fn zero_noise_uses_the_target_policy_exactly() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[1.0, 2.0, 3.0], TerminationKind::Terminal);
    let mock = Mock::new(|_| 0.0, |_| 0.0);
    mem.refresh_targets(&mock, &params(0.9, TargetRule::Twin), &mut rng()).unwrap();
    assert_eq!(*mock.seen.borrow(), vec![0.5, 1.0]);
}

#[test]
fn smoothing_noise_is_clipped() {
    let mut mem = EpisodicMemory::new(1000).unwrap();
    push_episode(&mut mem, 0.0, &[0.0; 500], TerminationKind::Terminal);
    let mock = Mock::new(|_| 0.0, |_| 0.0);
    let mut p = params(0.9, TargetRule::Twin);
    p.noise_sigma = 1.0;
    p.noise_clip = 0.25;
    mem.refresh_targets(&mock, &p, &mut rng()).unwrap();
    let seen = mock.seen.borrow();
    let mut hit_clip = 0;
    for (i, a) in seen.iter().enumerate() {
        let eps = a - 0.5 * (i + 1) as f64;
        assert!(eps.abs() <= 0.25 + 1e-12);
        if (eps.abs() - 0.25).abs() < 1e-12 {
            hit_clip += 1;
        }
    }
    // P(|N(0,1)| > 0.25) is about 0.80.
    assert!(hit_clip > 300 && hit_clip < 500, "{hit_clip}");
}

#[test]
fn sampling_before_refresh_is_an_error() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    assert!(matches!(mem.sample_batch(4, 1, &mut rng()), Err(MemoryError::NothingRefreshed)));
    push_episode(&mut mem, 0.0, &[1.0], TerminationKind::Terminal);
    assert!(matches!(mem.sample_batch(4, 1, &mut rng()), Err(MemoryError::NothingRefreshed)));
}

#[test]
fn single_refreshed_transition_is_drawn_every_time() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[2.5], TerminationKind::Terminal);
    mem.refresh_targets(&Mock::new(|_| 0.0, |_| 0.0), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    let b = mem.sample_batch(3, 1, &mut rng()).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(b.states, vec![0.0; 3]);
    assert_eq!(b.targets, vec![2.5; 3]);
}

#[test]
fn twin_choice_only_changes_the_target_field() {
    let mut mem = EpisodicMemory::new(100).unwrap();
    push_episode(&mut mem, 0.0, &[1.0, 0.0, 2.0, 0.0], TerminationKind::Terminal);
    mem.refresh_targets(&Mock::new(|s| s, |s| -s), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    let b1 = mem.sample_batch(16, 1, &mut rng()).unwrap();
    let b2 = mem.sample_batch(16, 2, &mut rng()).unwrap();
    assert_eq!(b1.states, b2.states);
    assert_eq!(b1.actions, b2.actions);
    assert_eq!(b1.rewards, b2.rewards);
    assert_eq!(b1.next_states, b2.next_states);
    assert_ne!(b1.targets, b2.targets);
}

#[test]
fn draws_are_uniform_over_transitions() {
    let mut mem = EpisodicMemory::new(1000).unwrap();
    // 100 transitions over trajectories of unequal length.
    let mut start = 0.0;
    for len in [1usize, 9, 20, 30, 40] {
        push_episode(&mut mem, start, &vec![0.0; len], TerminationKind::Terminal);
        start += 1000.0;
    }
    assert_eq!(mem.total_transitions(), 100);
    mem.refresh_targets(&Mock::new(|_| 0.0, |_| 0.0), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    let draws = 10_000;
    let b = mem.sample_batch(draws, 1, &mut rng()).unwrap();
    let mut counts = std::collections::HashMap::new();
    for s in &b.states {
        *counts.entry(s.to_bits()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 100);
    let expected = draws as f64 / 100.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of chi-square with 99 degrees of freedom.
    assert!(chi2 < 148.230_359, "chi-square {chi2}");
}

#[test]
fn csv_dump_has_one_row_per_transition() {
    let mut mem = EpisodicMemory::new(10).unwrap();
    push_episode(&mut mem, 0.0, &[1.0, 2.0], TerminationKind::Terminal);
    push_episode(&mut mem, 5.0, &[1.0], TerminationKind::Running);
    mem.refresh_targets(&Mock::new(|_| 0.0, |_| 0.0), &params(0.9, TargetRule::Twin), &mut rng())
        .unwrap();
    let mut out = Vec::new();
    mem.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "trajectory,step,state,action,reward,next_state,termination,target1,target2");
    assert!(lines[2].starts_with("0,1,1,0,2,2,terminal,2,2"));
    assert!(lines[3].ends_with("running,,"));
}

fn episode_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, bool)> {
    (1usize..25, any::<bool>()).prop_flat_map(|(n, timeout)| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-20.0f64..20.0, n + 1),
            prop::collection::vec(-20.0f64..20.0, n + 1),
            Just(timeout),
        )
    })
}

thread_local! {
    static TABLE: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn q1_lookup(s: f64) -> f64 {
    TABLE.with(|t| t.borrow().0[s as usize])
}

fn q2_lookup(s: f64) -> f64 {
    TABLE.with(|t| t.borrow().1[s as usize])
}

proptest! {
    #[test]
    fn refreshed_targets_match_direct_enumeration((rewards, q1, q2, timeout) in episode_strategy()) {
        let n = rewards.len();
        TABLE.with(|t| *t.borrow_mut() = (q1.clone(), q2.clone()));
        let end = if timeout { TerminationKind::Timeout } else { TerminationKind::Terminal };
        let mut mem = EpisodicMemory::new(100).unwrap();
        push_episode(&mut mem, 0.0, &rewards, end);
        let gamma = 0.95;
        mem.refresh_targets(&Mock::new(q1_lookup, q2_lookup), &params(gamma, TargetRule::Twin), &mut rng()).unwrap();
        let m = if timeout { n } else { n - 1 };
        let b1 = &q1[1..=m];
        let b2 = &q2[1..=m];
        let (r1, r2) = mem.trajectory(0).unwrap().targets().unwrap();
        let e1 = enumerate_crossed(&rewards, b1, b2, gamma);
        let e2 = enumerate_crossed(&rewards, b2, b1, gamma);
        for t in 0..n {
            prop_assert!((r1[t] - e1[t]).abs() <= 1e-10);
            prop_assert!((r2[t] - e2[t]).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_critic_targets_dominate_every_suffix_sum(rewards in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let mut mem = EpisodicMemory::new(100).unwrap();
        push_episode(&mut mem, 0.0, &rewards, TerminationKind::Terminal);
        let gamma = 0.9;
        mem.refresh_targets(&Mock::new(|_| 0.0, |_| 0.0), &params(gamma, TargetRule::Twin), &mut rng()).unwrap();
        let (r1, _) = mem.trajectory(0).unwrap().targets().unwrap();
        for t in 0..rewards.len() {
            let mut partial = 0.0;
            for (k, r) in rewards[t..].iter().enumerate() {
                partial += gamma.powi(k as i32) * r;
                prop_assert!(r1[t] >= partial - 1e-10);
            }
        }
    }

    #[test]
    fn eviction_never_splits_and_respects_capacity(
        lens in prop::collection::vec(1usize..12, 1..30),
        capacity in 12usize..60,
    ) {
        let mut mem = EpisodicMemory::new(capacity).unwrap();
        let mut start = 0.0;
        for len in &lens {
            push_episode(&mut mem, start, &vec![0.0; *len], TerminationKind::Terminal);
            start += 100.0;
            prop_assert!(mem.total_transitions() <= capacity);
            let stored: usize = mem.trajectories().map(|t| t.len()).sum();
            prop_assert_eq!(stored, mem.total_transitions());
        }
        // The surviving trajectories are a suffix of the inserted ones, intact.
        let kept: Vec<usize> = mem.trajectories().map(|t| t.len()).collect();
        prop_assert_eq!(&kept[..], &lens[lens.len() - kept.len()..]);
    }
}

#[test]
fn state_sampling_covers_unrefreshed_and_survives_eviction() {
    let mut mem = EpisodicMemory::new(6).unwrap();
    assert!(matches!(mem.sample_states(1, &mut rng()), Err(MemoryError::NothingStored)));
    push_episode(&mut mem, 0.0, &[0.0; 3], TerminationKind::Terminal);
    push_episode(&mut mem, 10.0, &[0.0; 3], TerminationKind::Terminal);
    push_episode(&mut mem, 20.0, &[0.0; 2], TerminationKind::Running);
    let states = mem.sample_states(2000, &mut rng()).unwrap();
    let mut seen: Vec<u64> = states.iter().map(|s| *s as u64).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen, vec![10, 11, 12, 20, 21]);
}
