//! Tabular twin back-propagation, an exact-match episodic control baseline,
//! and oracle checks of the learned tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backup::{backup_twin, BackupError, Horizon, TwinEstimates};
use crate::env::{policy_evaluation, q_max_exact, value_iteration, Environment, FiniteEnv, FiniteMdp, MdpError, QTable, TerminationKind};

/// Which table drives the epsilon-greedy behaviour policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationMode {
    /// Greedy on `(Q1 + Q2) / 2`.
    #[default]
    Average,
    /// Greedy on one table, drawn uniformly at the start of each episode.
    RandomTwin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub epsilon: f64,
    /// Learning-rate exponent: `alpha = 1 / (1 + visits)^omega`. Values near
    /// 0.5 forget the early, badly bootstrapped targets fastest.
    pub omega: f64,
    pub exploration: ExplorationMode,
    pub horizon: Horizon,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            omega: 0.51,
            exploration: ExplorationMode::Average,
            horizon: Horizon::Unlimited,
        }
    }
}

impl TabularConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            out.push(("epsilon", format!("must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.omega > 0.5 && self.omega <= 1.0) {
            out.push(("omega", format!("must lie in (0.5, 1], got {}", self.omega)));
        }
        if self.horizon == Horizon::Capped(0) {
            out.push(("horizon", "cap must be at least 1".into()));
        }
        out
    }
}

/// `1 / (1 + visits)^omega`.
pub fn learning_rate(visits: u64, omega: f64) -> f64 {
    (1.0 + visits as f64).powf(-omega)
}

/// Two action-value tables with per-entry visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinQTable {
    tables: [QTable; 2],
    visits: [Vec<u64>; 2],
    omega: f64,
}

impl TwinQTable {
    pub fn new(num_states: usize, num_actions: usize, omega: f64) -> Self {
        Self::from_tables(QTable::zeros(num_states, num_actions), QTable::zeros(num_states, num_actions), omega)
    }

    pub fn from_tables(q1: QTable, q2: QTable, omega: f64) -> Self {
        assert_eq!(
            (q1.num_states, q1.num_actions),
            (q2.num_states, q2.num_actions),
            "twin tables must share a shape"
        );
        let n = q1.num_states * q1.num_actions;
        Self {
            tables: [q1, q2],
            visits: [vec![0; n], vec![0; n]],
            omega,
        }
    }

    pub fn q1(&self) -> &QTable {
        &self.tables[0]
    }

    pub fn q2(&self) -> &QTable {
        &self.tables[1]
    }

    pub fn table(&self, i: usize) -> &QTable {
        &self.tables[i]
    }

    pub fn visits(&self, i: usize, s: usize, a: usize) -> u64 {
        self.visits[i][s * self.tables[i].num_actions + a]
    }

    pub fn average(&self) -> QTable {
        let (q1, q2) = (&self.tables[0], &self.tables[1]);
        let mut out = QTable::zeros(q1.num_states, q1.num_actions);
        for s in 0..q1.num_states {
            for a in 0..q1.num_actions {
                *out.get_mut(s, a) = (q1.get(s, a) + q2.get(s, a)) / 2.0;
            }
        }
        out
    }

    /// Moves `Q^(i)(s, a)` toward `target` with the visit-count step size.
    pub fn update(&mut self, i: usize, s: usize, a: usize, target: f64) {
        let idx = s * self.tables[i].num_actions + a;
        let lr = learning_rate(self.visits[i][idx], self.omega);
        let q = self.tables[i].get_mut(s, a);
        *q += lr * (target - *q);
        self.visits[i][idx] += 1;
    }

    pub fn swapped(&self) -> Self {
        Self {
            tables: [self.tables[1].clone(), self.tables[0].clone()],
            visits: [self.visits[1].clone(), self.visits[0].clone()],
            omega: self.omega,
        }
    }
}

/// Source of the per-step twin choice. A mirrored picker returns the other
/// twin for the same draw.
#[derive(Debug, Clone)]
pub struct TwinPicker {
    rng: ChaCha8Rng,
    mirrored: bool,
}

impl TwinPicker {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mirrored: false,
        }
    }

    pub fn mirrored(seed: u64) -> Self {
        Self {
            mirrored: true,
            ..Self::new(seed)
        }
    }

    pub fn pick(&mut self) -> usize {
        let i = usize::from(self.rng.random::<bool>());
        if self.mirrored {
            1 - i
        } else {
            i
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub undiscounted_return: f64,
    pub termination: TerminationKind,
}

fn epsilon_greedy<R: Rng + ?Sized>(q: &QTable, s: usize, epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.num_actions)
    } else {
        // Uniform among exact ties. Fixed tie-breaking lets a fresh table
        // loop on one wall-bump action until the episode cap, and the visit
        // counts piled up there freeze its step size long before it learns.
        let row = q.row(s);
        let best = q.max(s);
        let ties = row.iter().filter(|&&v| v == best).count();
        let k = if ties > 1 { rng.random_range(0..ties) } else { 0 };
        row.iter().enumerate().filter(|(_, &v)| v == best).nth(k).map_or(0, |(a, _)| a)
    }
}

fn state_value(mdp: &FiniteMdp, q: &QTable, s: usize) -> f64 {
    if mdp.is_terminal(s) {
        0.0
    } else {
        q.max(s)
    }
}

/// One epsilon-greedy episode followed by twin back-propagation over it.
///
/// Every target is computed from the tables as they were when the episode
/// ended; then each step updates one uniformly chosen twin.
pub fn tabular_gem_episode<R: Rng + ?Sized>(
    tables: &mut TwinQTable,
    env: &mut FiniteEnv,
    config: &TabularConfig,
    rng: &mut R,
    picker: &mut TwinPicker,
) -> Result<EpisodeSummary, BackupError> {
    let behaviour = match config.exploration {
        ExplorationMode::Average => tables.average(),
        ExplorationMode::RandomTwin => tables.table(picker.pick()).clone(),
    };
    let mut steps: Vec<(usize, usize, f64)> = Vec::new();
    let mut s = env.reset();
    let (last_state, termination) = loop {
        let a = epsilon_greedy(&behaviour, s, config.epsilon, rng);
        let out = env.step(&a);
        steps.push((s, a, out.reward));
        if out.termination.is_done() {
            break (out.next_state, out.termination);
        }
        s = out.next_state;
    };

    let mdp = env.mdp();
    let n = steps.len();
    let boot_len = if termination == TerminationKind::Timeout { n } else { n - 1 };
    let boot = |i: usize| -> Vec<f64> {
        (0..boot_len)
            .map(|t| {
                let next = if t + 1 < n { steps[t + 1].0 } else { last_state };
                state_value(mdp, tables.table(i), next)
            })
            .collect()
    };
    let est = TwinEstimates::new(boot(0), boot(1))?;
    let rewards: Vec<f64> = steps.iter().map(|x| x.2).collect();
    let (r1, r2) = backup_twin(&rewards, &est, mdp.gamma(), config.horizon)?;
    for (t, &(s, a, _)) in steps.iter().enumerate() {
        let i = picker.pick();
        let target = if i == 0 { r1[t] } else { r2[t] };
        tables.update(i, s, a, target);
    }
    Ok(EpisodeSummary {
        steps: n,
        undiscounted_return: rewards.iter().sum(),
        termination,
    })
}

/// Exact-match episodic table: the best discounted return seen from each
/// state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MfecTable {
    num_actions: usize,
    values: Vec<Option<f64>>,
}

impl MfecTable {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            values: vec![None; num_states * num_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.values[s * self.num_actions + a]
    }

    /// Folds one trajectory of `(state, action, reward)` into the table.
    pub fn update(&mut self, trajectory: &[(usize, usize, f64)], gamma: f64) {
        let mut ret = 0.0;
        for &(s, a, r) in trajectory.iter().rev() {
            ret = r + gamma * ret;
            let slot = &mut self.values[s * self.num_actions + a];
            *slot = Some(slot.map_or(ret, |v| v.max(ret)));
        }
    }

    /// Untried actions first (lowest index), then the best recorded value.
    pub fn greedy(&self, s: usize) -> usize {
        let row = &self.values[s * self.num_actions..(s + 1) * self.num_actions];
        if let Some(a) = row.iter().position(Option::is_none) {
            return a;
        }
        let mut best = 0;
        for a in 1..self.num_actions {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

pub fn mfec_episode<R: Rng + ?Sized>(
    table: &mut MfecTable,
    env: &mut FiniteEnv,
    epsilon: f64,
    rng: &mut R,
) -> EpisodeSummary {
    let mut trajectory = Vec::new();
    let mut s = env.reset();
    let termination = loop {
        let a = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            rng.random_range(0..table.num_actions)
        } else {
            table.greedy(s)
        };
        let out = env.step(&a);
        trajectory.push((s, a, out.reward));
        if out.termination.is_done() {
            break out.termination;
        }
        s = out.next_state;
    };
    table.update(&trajectory, env.mdp().gamma());
    EpisodeSummary {
        steps: trajectory.len(),
        undiscounted_return: trajectory.iter().map(|x| x.2).sum(),
        termination,
    }
}

/// Largest violations of `Q* <= Q <= Q_max` over both tables and every
/// non-terminal state-action pair. Positive numbers are violations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub lower_violation: f64,
    pub upper_violation: f64,
    /// Largest `Q_max - Q*`.
    pub mu: f64,
}

impl SandwichReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.lower_violation <= slack && self.upper_violation <= slack
    }
}

pub fn check_sandwich(tables: &TwinQTable, mdp: &FiniteMdp) -> Result<SandwichReport, MdpError> {
    let q_star = value_iteration(mdp, 1e-12)?;
    let q_max = q_max_exact(mdp)?;
    let mut report = SandwichReport {
        lower_violation: f64::NEG_INFINITY,
        upper_violation: f64::NEG_INFINITY,
        mu: 0.0,
    };
    for s in (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.num_actions() {
            report.mu = report.mu.max(q_max.get(s, a) - q_star.get(s, a));
            for i in 0..2 {
                let q = tables.table(i).get(s, a);
                report.lower_violation = report.lower_violation.max(q_star.get(s, a) - q);
                report.upper_violation = report.upper_violation.max(q - q_max.get(s, a));
            }
        }
    }
    Ok(report)
}

/// Exact evaluation of the greedy policy of the averaged table against
/// `V* - 2 mu / (1 - gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    pub mu: f64,
    pub bound: f64,
    /// Largest `V*(s) - V^pi(s)`.
    pub realized_gap: f64,
    /// Largest amount by which some state falls below the bound (0 if none).
    pub violation: f64,
}

pub fn check_performance_bound(tables: &TwinQTable, mdp: &FiniteMdp) -> Result<PerformanceReport, MdpError> {
    let q_star = value_iteration(mdp, 1e-12)?;
    let q_max = q_max_exact(mdp)?;
    let mut mu: f64 = 0.0;
    for s in (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.num_actions() {
            mu = mu.max(q_max.get(s, a) - q_star.get(s, a));
        }
    }
    let bound = 2.0 * mu / (1.0 - mdp.gamma());
    let policy = tables.average().greedy_policy();
    let v_pi = policy_evaluation(mdp, &policy)?;
    let mut gap: f64 = 0.0;
    let mut violation: f64 = 0.0;
    for s in (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)) {
        let v_star = q_star.max(s);
        gap = gap.max(v_star - v_pi[s]);
        violation = violation.max(v_star - bound - v_pi[s]);
    }
    Ok(PerformanceReport {
        mu,
        bound,
        realized_gap: gap,
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_gridworld;

    #[test]
    fn default_schedule_is_a_valid_robbins_monro_sequence() {
        // sum 1/n^w diverges iff w <= 1; sum 1/n^(2w) converges iff 2w > 1.
        let w = TabularConfig::default().omega;
        assert!(w <= 1.0 && 2.0 * w > 1.0);
        assert_eq!(learning_rate(0, w), 1.0);
        let partial: f64 = (0..100_000u64).map(|n| learning_rate(n, w)).sum();
        assert!(partial > 40.0);
    }

    #[test]
    fn first_update_copies_the_target() {
        let mut t = TwinQTable::new(2, 2, 0.8);
        t.update(1, 0, 1, 4.0);
        assert_eq!(t.q2().get(0, 1), 4.0);
        assert_eq!(t.q1().get(0, 1), 0.0);
        t.update(1, 0, 1, 0.0);
        assert!((t.q2().get(0, 1) - 4.0 * (1.0 - 2f64.powf(-0.8))).abs() < 1e-12);
    }

    #[test]
    fn mfec_keeps_the_best_return() {
        let mut m = MfecTable::new(1, 1);
        m.update(&[(0, 0, 4.0)], 0.9);
        assert_eq!(m.get(0, 0), Some(4.0));
        m.update(&[(0, 0, 7.0)], 0.9);
        m.update(&[(0, 0, 4.0)], 0.9);
        assert_eq!(m.get(0, 0), Some(7.0));
    }

    #[test]
    fn fresh_tables_violate_the_lower_bound() {
        let mdp = make_gridworld(3, 3, (2, 2), 0.0, 1.0).unwrap();
        let r = check_sandwich(&TwinQTable::new(9, 4, 0.8), &mdp).unwrap();
        assert!((r.lower_violation - 1.0).abs() < 1e-9);
        assert!(!r.holds(0.02));
    }
}
