use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Environment, StepOutcome, TerminationKind};

/// Iteration cap shared by the value-iteration style solvers.
pub const VALUE_ITERATION_CAP: usize = 200_000;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("transition row ({state}, {action}) sums to {sum}")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("discount {0} must lie in [0, 1)")]
    Gamma(f64),
    #[error("non-finite reward at ({state}, {action}, {next})")]
    Reward { state: usize, action: usize, next: usize },
    #[error("table sizes do not match {states} states x {actions} actions")]
    Shape { states: usize, actions: usize },
    #[error("initial distribution sums to {0}")]
    Initial(f64),
    #[error("degenerate {width}x{height} grid")]
    DegenerateGrid { width: usize, height: usize },
    #[error("goal ({0}, {1}) lies outside the grid")]
    GoalOutside(usize, usize),
    #[error("no convergence after {iterations} iterations; residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("policy evaluation system is singular")]
    Singular,
}

/// A finite discounted MDP.
///
/// Rewards are attached to transitions `(s, a, s')`; the usual state-action
/// reward is their expectation ([`FiniteMdp::expected_reward`]). Terminal
/// states are absorbing and carry zero value.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    initial: Vec<f64>,
    terminal: Vec<bool>,
}

impl FiniteMdp {
    /// `transition` and `reward` are indexed `[(s * A + a) * S + s']`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self, MdpError> {
        let cells = num_states * num_actions * num_states;
        if num_states == 0
            || num_actions == 0
            || transition.len() != cells
            || reward.len() != cells
            || initial.len() != num_states
            || terminal.len() != num_states
        {
            return Err(MdpError::Shape {
                states: num_states,
                actions: num_actions,
            });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::Gamma(gamma));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let base = (s * num_actions + a) * num_states;
                let sum: f64 = transition[base..base + num_states].iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL || transition[base..base + num_states].iter().any(|&p| p < 0.0) {
                    return Err(MdpError::RowSum { state: s, action: a, sum });
                }
                if let Some(next) = reward[base..base + num_states].iter().position(|r| !r.is_finite()) {
                    return Err(MdpError::Reward { state: s, action: a, next });
                }
            }
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(MdpError::Initial(total));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            initial,
            terminal,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self, MdpError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::Gamma(gamma));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    #[inline]
    fn idx(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.num_actions + a) * self.num_states + next
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.idx(s, a, next)]
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.reward[self.idx(s, a, next)]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = self.idx(s, a, 0);
        &self.transition[base..base + self.num_states]
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.successors(s, a).map(|(_, p, r)| p * r).sum()
    }

    /// `(s', P(s'|s,a), r(s,a,s'))` over the support of `P(.|s,a)`.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let base = self.idx(s, a, 0);
        (0..self.num_states).filter_map(move |n| {
            let p = self.transition[base + n];
            (p > 0.0).then(|| (n, p, self.reward[base + n]))
        })
    }

    /// True when every transition row has a single successor.
    pub fn is_deterministic(&self) -> bool {
        (0..self.num_states)
            .all(|s| (0..self.num_actions).all(|a| self.successors(s, a).count() == 1))
    }

    /// Exact sticky-action dynamics over augmented states `(s, previous action)`.
    ///
    /// Augmented index is `s * (A + 1) + prev`, where `prev == A` marks the
    /// start of an episode (nothing to repeat). With probability `sticky_prob`
    /// the previous action is executed instead of the chosen one.
    pub fn with_sticky_actions(&self, sticky_prob: f64) -> Result<FiniteMdp, MdpError> {
        let na = self.num_actions;
        let slots = na + 1;
        let ns = self.num_states * slots;
        let mut transition = vec![0.0; ns * na * ns];
        let mut reward = vec![0.0; ns * na * ns];
        let mut initial = vec![0.0; ns];
        let mut terminal = vec![false; ns];
        for s in 0..self.num_states {
            initial[s * slots + na] = self.initial[s];
            for prev in 0..slots {
                let from = s * slots + prev;
                terminal[from] = self.terminal[s];
                for a in 0..na {
                    let outcomes: Vec<(usize, f64)> = if prev == na || prev == a {
                        vec![(a, 1.0)]
                    } else {
                        vec![(a, 1.0 - sticky_prob), (prev, sticky_prob)]
                    };
                    for (exec, w) in outcomes {
                        for (next, p, r) in self.successors(s, exec) {
                            let to = next * slots + exec;
                            let cell = (from * na + a) * ns + to;
                            transition[cell] += w * p;
                            reward[cell] = r;
                        }
                    }
                }
            }
        }
        FiniteMdp::new(ns, na, transition, reward, self.gamma, initial, terminal)
    }
}

/// Dense state-action table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn filled(num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn get_mut(&mut self, s: usize, a: usize) -> &mut f64 {
        &mut self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; the smallest index wins ties.
    pub fn greedy(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn greedy_policy(&self) -> Vec<usize> {
        (0..self.num_states).map(|s| self.greedy(s)).collect()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn bootstrap(mdp: &FiniteMdp, q: &QTable, next: usize) -> f64 {
    if mdp.terminal[next] {
        0.0
    } else {
        q.max(next)
    }
}

fn bellman_optimality(mdp: &FiniteMdp, q: &QTable, s: usize, a: usize) -> f64 {
    mdp.successors(s, a)
        .map(|(n, p, r)| p * (r + mdp.gamma * bootstrap(mdp, q, n)))
        .sum()
}

fn bellman_max_plus(mdp: &FiniteMdp, q: &QTable, s: usize, a: usize) -> f64 {
    mdp.successors(s, a)
        .map(|(n, _, r)| r + mdp.gamma * bootstrap(mdp, q, n))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sup-norm of `T Q - Q` over non-terminal states.
pub fn bellman_residual(mdp: &FiniteMdp, q: &QTable) -> f64 {
    let mut worst: f64 = 0.0;
    for s in (0..mdp.num_states).filter(|&s| !mdp.terminal[s]) {
        for a in 0..mdp.num_actions {
            worst = worst.max((bellman_optimality(mdp, q, s, a) - q.get(s, a)).abs());
        }
    }
    worst
}

fn iterate<F>(mdp: &FiniteMdp, tol: f64, backup: F) -> Result<QTable, MdpError>
where
    F: Fn(&FiniteMdp, &QTable, usize, usize) -> f64,
{
    if !(tol > 0.0) {
        return Err(MdpError::Tolerance(tol));
    }
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut next = q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..VALUE_ITERATION_CAP {
        change = 0.0;
        for s in (0..mdp.num_states).filter(|&s| !mdp.terminal[s]) {
            for a in 0..mdp.num_actions {
                let v = backup(mdp, &q, s, a);
                change = change.max((v - q.get(s, a)).abs());
                *next.get_mut(s, a) = v;
            }
        }
        std::mem::swap(&mut q, &mut next);
        // The contraction bounds the residual of the new iterate by gamma * change.
        if change < tol {
            return Ok(q);
        }
    }
    Err(MdpError::NoConvergence {
        iterations: VALUE_ITERATION_CAP,
        residual: change,
    })
}

/// Optimal action values `Q*` with Bellman residual below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<QTable, MdpError> {
    iterate(mdp, tol, bellman_optimality)
}

/// Best discounted return over any path that stays inside the support of the
/// dynamics: value iteration with the expectation replaced by a max.
pub fn q_max_exact(mdp: &FiniteMdp) -> Result<QTable, MdpError> {
    iterate(mdp, 1e-12, bellman_max_plus)
}

/// Exact state values of a deterministic policy, by solving
/// `(I - gamma P_pi) V = r_pi` with Gaussian elimination.
pub fn policy_evaluation(mdp: &FiniteMdp, policy: &[usize]) -> Result<Vec<f64>, MdpError> {
    let n = mdp.num_states;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s * n + s] = 1.0;
        if mdp.terminal[s] {
            continue;
        }
        for (next, p, r) in mdp.successors(s, policy[s]) {
            b[s] += p * r;
            if !mdp.terminal[next] {
                a[s * n + next] -= mdp.gamma * p;
            }
        }
    }
    solve_dense(n, a, b)
}

fn solve_dense(n: usize, mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>, MdpError> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(MdpError::Singular);
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Deterministic gridworld with actions up, right, down, left (0..4).
///
/// States are `y * width + x`. Entering the goal pays `goal_reward` and ends
/// the episode; every other move pays `step_reward`. Moves into a wall leave
/// the agent in place. Episodes start uniformly on non-goal cells. The
/// discount is 0.9; use [`FiniteMdp::with_gamma`] to change it.
pub fn make_gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    step_reward: f64,
    goal_reward: f64,
) -> Result<FiniteMdp, MdpError> {
    if width < 2 || height < 2 {
        return Err(MdpError::DegenerateGrid { width, height });
    }
    if goal.0 >= width || goal.1 >= height {
        return Err(MdpError::GoalOutside(goal.0, goal.1));
    }
    let ns = width * height;
    let na = 4;
    let goal_state = goal.1 * width + goal.0;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    for y in 0..height {
        for x in 0..width {
            let s = y * width + x;
            for a in 0..na {
                let next = if s == goal_state {
                    s
                } else {
                    let (nx, ny) = match a {
                        0 => (x, y.saturating_sub(1)),
                        1 => ((x + 1).min(width - 1), y),
                        2 => (x, (y + 1).min(height - 1)),
                        _ => (x.saturating_sub(1), y),
                    };
                    ny * width + nx
                };
                let cell = (s * na + a) * ns + next;
                transition[cell] = 1.0;
                reward[cell] = if s != goal_state && next == goal_state {
                    goal_reward
                } else if s == goal_state {
                    0.0
                } else {
                    step_reward
                };
            }
        }
    }
    let start = 1.0 / (ns - 1) as f64;
    let initial = (0..ns).map(|s| if s == goal_state { 0.0 } else { start }).collect();
    let terminal = (0..ns).map(|s| s == goal_state).collect();
    FiniteMdp::new(ns, na, transition, reward, 0.9, initial, terminal)
}

/// Deterministic chain of `positions` cells with actions left (0) and right (1).
///
/// Episodes start in cell 0. Acting in the last cell pays 1 and moves to an
/// absorbing terminal state (index `positions`), so from the start the optimal
/// value of moving right is `gamma^(positions - 1)`.
pub fn make_chain(positions: usize, gamma: f64) -> Result<FiniteMdp, MdpError> {
    if positions < 2 {
        return Err(MdpError::DegenerateGrid { width: positions, height: 1 });
    }
    let ns = positions + 1;
    let end = positions;
    let goal = positions - 1;
    let na = 2;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let (next, r) = if s == end {
                (end, 0.0)
            } else if s == goal {
                (end, 1.0)
            } else if a == 0 {
                (s.saturating_sub(1), 0.0)
            } else {
                (s + 1, 0.0)
            };
            let cell = (s * na + a) * ns + next;
            transition[cell] = 1.0;
            reward[cell] = r;
        }
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    let terminal = (0..ns).map(|s| s == end).collect();
    FiniteMdp::new(ns, na, transition, reward, gamma, initial, terminal)
}

/// One-shot two-armed bandit: either arm pays 0 or 1 with probability 1/2.
///
/// State 0 is the decision state; states 1 (win) and 2 (loss) are terminal.
/// `Q*(0, a) = 0.5` and `Q_max(0, a) = 1`, so the stochasticity gap is 0.5.
pub fn make_bandit_mu(gamma: f64) -> Result<FiniteMdp, MdpError> {
    let ns = 3;
    let na = 2;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    for a in 0..na {
        let base = a * ns;
        transition[base + 1] = 0.5;
        transition[base + 2] = 0.5;
        reward[base + 1] = 1.0;
    }
    for s in 1..ns {
        for a in 0..na {
            transition[(s * na + a) * ns + s] = 1.0;
        }
    }
    FiniteMdp::new(
        ns,
        na,
        transition,
        reward,
        gamma,
        vec![1.0, 0.0, 0.0],
        vec![false, true, true],
    )
}

/// Random stochastic MDP with `num_states` decision states plus one terminal
/// state. Each state-action pair has `branching` distinct successors (drawn
/// from all states, terminal included) with random probabilities and
/// transition rewards uniform in `[0, 1)`.
pub fn make_random_mdp(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    gamma: f64,
    seed: u64,
) -> Result<FiniteMdp, MdpError> {
    let ns = num_states + 1;
    let term = num_states;
    let branching = branching.clamp(1, ns);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = vec![0.0; ns * num_actions * ns];
    let mut reward = vec![0.0; ns * num_actions * ns];
    for s in 0..ns {
        for a in 0..num_actions {
            let base = (s * num_actions + a) * ns;
            if s == term {
                transition[base + term] = 1.0;
                continue;
            }
            let picks = index::sample(&mut rng, ns, branching);
            let weights: Vec<f64> = (0..branching).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (next, w) in picks.iter().zip(weights) {
                transition[base + next] = w / total;
                reward[base + next] = rng.random::<f64>();
            }
            // Renormalize against rounding so the row sums to 1 within 1e-9.
            let sum: f64 = transition[base..base + ns].iter().sum();
            for p in &mut transition[base..base + ns] {
                *p /= sum;
            }
        }
    }
    let mut initial = vec![1.0 / num_states as f64; ns];
    initial[term] = 0.0;
    let terminal = (0..ns).map(|s| s == term).collect();
    FiniteMdp::new(ns, num_actions, transition, reward, gamma, initial, terminal)
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair under 1; fall back to the last supported index.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sampling wrapper around a [`FiniteMdp`].
#[derive(Debug, Clone)]
pub struct FiniteEnv {
    mdp: FiniteMdp,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
    episode_cap: usize,
}

impl FiniteEnv {
    pub fn new(mdp: FiniteMdp, episode_cap: usize, seed: u64) -> Self {
        Self {
            mdp,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: 0,
            steps: 0,
            episode_cap: episode_cap.max(1),
        }
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn episode_cap(&self) -> usize {
        self.episode_cap
    }
}

impl Environment for FiniteEnv {
    type State = usize;
    type Action = usize;

    fn reset(&mut self) -> usize {
        self.state = sample_index(&mut self.rng, &self.mdp.initial);
        self.steps = 0;
        self.state
    }

    fn step(&mut self, action: &usize) -> StepOutcome<usize> {
        let row = self.mdp.transition_row(self.state, *action);
        let next = sample_index(&mut self.rng, row);
        let reward = self.mdp.reward(self.state, *action, next);
        self.state = next;
        self.steps += 1;
        let termination = if self.mdp.terminal[next] {
            TerminationKind::Terminal
        } else if self.steps >= self.episode_cap {
            TerminationKind::Timeout
        } else {
            TerminationKind::Running
        };
        StepOutcome {
            next_state: next,
            reward,
            termination,
        }
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}
