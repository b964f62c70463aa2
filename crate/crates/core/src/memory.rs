//! Trajectory-structured episodic memory.
//!
//! Transitions are stored episode by episode so that return targets can be
//! recomputed by sweeping each finished trajectory backwards. Targets are only
//! ever sampled from trajectories that have been refreshed at least once.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::NetError;
use crate::backup::{backup_nstep, backup_single, backup_twin, BackupError, Horizon, TwinEstimates};
use crate::env::TerminationKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub termination: TerminationKind,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("trajectory already sealed; call begin_episode before appending")]
    AppendAfterSeal,
    #[error("begin_episode called while a trajectory of length {0} is still open")]
    EpisodeOpen(usize),
    #[error("transition does not continue the open trajectory")]
    Discontinuous,
    #[error("transition dimensions (state {state}, action {action}) do not match memory ({want_state}, {want_action})")]
    Dimension {
        state: usize,
        action: usize,
        want_state: usize,
        want_action: usize,
    },
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error("memory capacity must be positive")]
    ZeroCapacity,
    #[error("open trajectory alone exceeds the capacity of {0} transitions")]
    TrajectoryTooLong(usize),
    #[error("memory is empty")]
    NothingStored,
    #[error("no refreshed transitions to sample from")]
    NothingRefreshed,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error(transparent)]
    Backup(#[from] BackupError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("smoothing noise std {0} is invalid")]
    Noise(f64),
    #[error("dump failed: {0}")]
    Dump(String),
}

/// One episode. `targets` holds `(R^(1), R^(2))` once refreshed.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    transitions: Vec<Transition>,
    targets: Option<(Vec<f64>, Vec<f64>)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn targets(&self) -> Option<(&[f64], &[f64])> {
        self.targets.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    pub fn is_sealed(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.termination.is_done())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    /// States whose values bootstrap the backup: `s_{t+1}` for every step
    /// but the last, plus the final next state after a timeout.
    fn bootstrap_states(&self) -> impl Iterator<Item = &[f64]> {
        let n = self.len();
        let timeout = self.transitions[n - 1].termination == TerminationKind::Timeout;
        let m = if timeout { n } else { n - 1 };
        self.transitions[..m].iter().map(|t| t.next_state.as_slice())
    }
}

/// How refreshed targets are formed from the twin bootstrap values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// Twin back-propagation.
    Twin,
    /// Each twin plans and scores with its own estimates.
    Single,
    /// Fixed n-step return per twin.
    NStep(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshParams {
    pub gamma: f64,
    pub horizon: Horizon,
    /// Std of the target-policy smoothing noise.
    pub noise_sigma: f64,
    /// Clip of the smoothing noise.
    pub noise_clip: f64,
    pub rule: TargetRule,
    /// Refresh at most this many sealed trajectories, chosen uniformly.
    pub max_trajectories: Option<usize>,
}

/// Slow target copies of the policy and the twin critics.
pub trait TargetModel {
    fn action_bounds(&self) -> &[(f64, f64)];
    /// Row-major batch of target-policy actions.
    fn target_actions(&self, states: &[f64], batch: usize) -> Result<Vec<f64>, NetError>;
    /// Clipped target values of both twins.
    fn target_values(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>), NetError>;
}

/// Sampled minibatch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefreshStats {
    pub trajectories: usize,
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    trajectories: VecDeque<Trajectory>,
    capacity: usize,
    total: usize,
    dims: Option<(usize, usize)>,
    awaiting_episode: bool,
    /// `(trajectory position, step)` of every refreshed transition.
    index: Vec<(u32, u32)>,
    index_dirty: bool,
    /// `(trajectory id, step)` of every stored transition; ids count from the
    /// first trajectory ever stored.
    all: VecDeque<(u64, u32)>,
    evicted: u64,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            trajectories: VecDeque::new(),
            capacity,
            total: 0,
            dims: None,
            awaiting_episode: true,
            index: Vec::new(),
            index_dirty: false,
            all: VecDeque::new(),
            evicted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_transitions(&self) -> usize {
        self.total
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter()
    }

    pub fn trajectory(&self, i: usize) -> Option<&Trajectory> {
        self.trajectories.get(i)
    }

    fn open(&self) -> Option<&Trajectory> {
        self.trajectories.back().filter(|t| !t.is_sealed())
    }

    /// Marks the start of a new episode.
    pub fn begin_episode(&mut self) -> Result<(), MemoryError> {
        if let Some(t) = self.open() {
            return Err(MemoryError::EpisodeOpen(t.len()));
        }
        self.awaiting_episode = true;
        Ok(())
    }

    pub fn append_step(&mut self, transition: Transition) -> Result<(), MemoryError> {
        if !transition.reward.is_finite() {
            return Err(MemoryError::NonFiniteReward(transition.reward));
        }
        let (sd, ad) = (transition.state.len(), transition.action.len());
        let (want_state, want_action) = *self.dims.get_or_insert((sd, ad));
        if sd != want_state || ad != want_action || transition.next_state.len() != want_state {
            return Err(MemoryError::Dimension {
                state: sd,
                action: ad,
                want_state,
                want_action,
            });
        }
        let id = self.evicted + self.trajectories.len() as u64;
        match self.trajectories.back_mut().filter(|t| !t.is_sealed()) {
            Some(open) => {
                let prev = open.transitions.last().expect("open trajectories are non-empty");
                if prev.next_state != transition.state {
                    return Err(MemoryError::Discontinuous);
                }
                self.all.push_back((id - 1, open.len() as u32));
                open.transitions.push(transition);
                open.targets = None;
            }
            None => {
                if !self.awaiting_episode {
                    return Err(MemoryError::AppendAfterSeal);
                }
                self.awaiting_episode = false;
                self.all.push_back((id, 0));
                self.trajectories.push_back(Trajectory {
                    transitions: vec![transition],
                    targets: None,
                });
            }
        }
        self.total += 1;
        self.evict()
    }

    fn evict(&mut self) -> Result<(), MemoryError> {
        while self.total > self.capacity {
            if self.trajectories.len() == 1 {
                return Err(MemoryError::TrajectoryTooLong(self.capacity));
            }
            let old = self.trajectories.pop_front().expect("non-empty");
            self.total -= old.len();
            self.evicted += 1;
            while self.all.front().is_some_and(|&(id, _)| id < self.evicted) {
                self.all.pop_front();
            }
            self.index_dirty = true;
        }
        Ok(())
    }

    /// Number of transitions whose targets are set.
    pub fn refreshed_transitions(&mut self) -> usize {
        self.rebuild_index();
        self.index.len()
    }

    fn rebuild_index(&mut self) {
        if !self.index_dirty {
            return;
        }
        self.index.clear();
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.targets.is_some() {
                self.index.extend((0..traj.len() as u32).map(|t| (i as u32, t)));
            }
        }
        self.index_dirty = false;
    }

    /// Recompute `(R^(1), R^(2))` for sealed trajectories with a backward
    /// sweep over each.
    pub fn refresh_targets<M, R>(&mut self, model: &M, params: &RefreshParams, rng: &mut R) -> Result<RefreshStats, MemoryError>
    where
        M: TargetModel + ?Sized,
        R: Rng + ?Sized,
    {
        let sealed: Vec<usize> = (0..self.trajectories.len())
            .filter(|&i| self.trajectories[i].is_sealed())
            .collect();
        let chosen: Vec<usize> = match params.max_trajectories {
            Some(k) if k < sealed.len() => {
                let mut picks: Vec<usize> = sample_indices(rng, sealed.len(), k).into_iter().map(|j| sealed[j]).collect();
                picks.sort_unstable();
                picks
            }
            _ => sealed,
        };
        let noise = if params.noise_sigma != 0.0 {
            Some(Normal::new(0.0, params.noise_sigma).map_err(|_| MemoryError::Noise(params.noise_sigma))?)
        } else {
            None
        };
        let bounds = model.action_bounds().to_vec();
        let mut stats = RefreshStats::default();
        for &i in &chosen {
            let traj = &self.trajectories[i];
            let rewards = traj.rewards();
            let states: Vec<f64> = traj.bootstrap_states().flatten().copied().collect();
            let m = traj.bootstrap_states().count();
            let (q1, q2) = if m == 0 {
                (Vec::new(), Vec::new())
            } else {
                let mut actions = model.target_actions(&states, m)?;
                for (k, a) in actions.iter_mut().enumerate() {
                    let (lo, hi) = bounds[k % bounds.len()];
                    let eps = match &noise {
                        Some(n) => n.sample(rng).clamp(-params.noise_clip, params.noise_clip),
                        None => 0.0,
                    };
                    *a = (*a + eps).clamp(lo, hi);
                }
                model.target_values(&states, &actions, m)?
            };
            let targets = match params.rule {
                TargetRule::Twin => backup_twin(&rewards, &TwinEstimates::new(q1, q2)?, params.gamma, params.horizon)?,
                TargetRule::Single => (
                    backup_single(&rewards, &q1, params.gamma, params.horizon)?,
                    backup_single(&rewards, &q2, params.gamma, params.horizon)?,
                ),
                TargetRule::NStep(n) => (
                    backup_nstep(&rewards, &q1, params.gamma, n)?,
                    backup_nstep(&rewards, &q2, params.gamma, n)?,
                ),
            };
            stats.trajectories += 1;
            stats.transitions += rewards.len();
            self.trajectories[i].targets = Some(targets);
        }
        self.index_dirty = true;
        Ok(stats)
    }

    /// `n` uniform draws with replacement over refreshed transitions, carrying
    /// the target of twin `which` (1 or 2).
    pub fn sample_batch<R: Rng + ?Sized>(&mut self, n: usize, which: usize, rng: &mut R) -> Result<Batch, MemoryError> {
        assert!(which == 1 || which == 2, "twin index is 1 or 2, got {which}");
        let picks = self.sample_positions(n, rng)?;
        Ok(self.gather(&picks, which))
    }

    /// `n` uniform draws with replacement over every stored state, refreshed
    /// or not. Returned row-major.
    pub fn sample_states<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>, MemoryError> {
        if n == 0 {
            return Err(MemoryError::EmptyBatch);
        }
        if self.all.is_empty() {
            return Err(MemoryError::NothingStored);
        }
        let sd = self.dims.map_or(0, |d| d.0);
        let mut out = Vec::with_capacity(n * sd);
        for _ in 0..n {
            let (id, t) = self.all[rng.random_range(0..self.all.len())];
            let traj = &self.trajectories[(id - self.evicted) as usize];
            out.extend_from_slice(&traj.transitions[t as usize].state);
        }
        Ok(out)
    }

    fn sample_positions<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<(u32, u32)>, MemoryError> {
        if n == 0 {
            return Err(MemoryError::EmptyBatch);
        }
        self.rebuild_index();
        if self.index.is_empty() {
            return Err(MemoryError::NothingRefreshed);
        }
        Ok((0..n).map(|_| self.index[rng.random_range(0..self.index.len())]).collect())
    }

    fn gather(&self, picks: &[(u32, u32)], which: usize) -> Batch {
        let (sd, ad) = self.dims.unwrap_or((0, 0));
        let mut b = Batch {
            states: Vec::with_capacity(picks.len() * sd),
            actions: Vec::with_capacity(picks.len() * ad),
            rewards: Vec::with_capacity(picks.len()),
            next_states: Vec::with_capacity(picks.len() * sd),
            targets: Vec::with_capacity(picks.len()),
        };
        for &(i, t) in picks {
            let traj = &self.trajectories[i as usize];
            let tr = &traj.transitions[t as usize];
            let (r1, r2) = traj.targets.as_ref().expect("indexed trajectories are refreshed");
            b.states.extend_from_slice(&tr.state);
            b.actions.extend_from_slice(&tr.action);
            b.rewards.push(tr.reward);
            b.next_states.extend_from_slice(&tr.next_state);
            b.targets.push(if which == 1 { r1[t as usize] } else { r2[t as usize] });
        }
        b
    }

    /// One CSV row per stored transition. Vector fields are `;`-separated;
    /// unset targets are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MemoryError> {
        let mut out = csv::Writer::from_writer(w);
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let err = |e: csv::Error| MemoryError::Dump(e.to_string());
        out.write_record([
            "trajectory",
            "step",
            "state",
            "action",
            "reward",
            "next_state",
            "termination",
            "target1",
            "target2",
        ])
        .map_err(err)?;
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (t, tr) in traj.transitions.iter().enumerate() {
                let (r1, r2) = match &traj.targets {
                    Some((a, b)) => (a[t].to_string(), b[t].to_string()),
                    None => (String::new(), String::new()),
                };
                out.write_record([
                    i.to_string(),
                    t.to_string(),
                    join(&tr.state),
                    join(&tr.action),
                    tr.reward.to_string(),
                    join(&tr.next_state),
                    tr.termination.as_str().to_string(),
                    r1,
                    r2,
                ])
                .map_err(err)?;
            }
        }
        out.flush().map_err(|e| MemoryError::Dump(e.to_string()))
    }
}
