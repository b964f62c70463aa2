use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{validate, ConfigError, ExperimentConfig, ExperimentKind};
use super::HarnessError;
use crate::agent::{make_ablation, GemAgent, Variant};
use crate::biaslab::{run_bias_experiment, standard_trajectories, NoiseModel};
use crate::env::{
    value_iteration, Environment, EnvId, FiniteEnv, FiniteMdp, PointMass, QTable, HAND_POLICY_MEDIAN_RETURN,
};
use crate::tabular::{
    check_performance_bound, check_sandwich, mfec_episode, tabular_gem_episode, MfecTable, TwinPicker, TwinQTable,
};

/// Fraction of seeds that must pass a per-seed check for a multi-seed verdict.
const SEED_PASS_FRACTION: f64 = 0.8;
/// Tabular runs pass when the averaged table is this close to the optimum.
const TABULAR_TOLERANCE: f64 = 0.01;
/// Evaluations averaged at the end of a continuous run.
pub const FINAL_EVALS: usize = 5;

/// One CSV row: `seed,step,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Headline numbers of one seed, by name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub scalars: BTreeMap<String, f64>,
}

impl SeedSummary {
    pub fn get(&self, name: &str) -> f64 {
        self.scalars.get(name).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub passed: bool,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    pub verdict: Verdict,
}

struct SeedRun {
    rows: Vec<MetricsRow>,
    scalars: BTreeMap<String, f64>,
}

impl SeedRun {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            scalars: BTreeMap::new(),
        }
    }

    fn push(&mut self, seed: u64, step: u64, metric: impl Into<String>, value: f64) {
        self.rows.push(MetricsRow {
            seed,
            step,
            metric: metric.into(),
            value,
        });
    }
}

/// A seed that failed part-way, with whatever it logged first.
struct SeedFailure {
    rows: Vec<MetricsRow>,
    message: String,
}

fn tail_mean(values: &[f64], k: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(k)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn continuous(
    config: &ExperimentConfig,
    seed: u64,
    variant: Variant,
    prefix: &str,
    run: &mut SeedRun,
) -> Result<(), String> {
    // Only one continuous environment exists; validation guarantees the id.
    let mut env = PointMass::new(seed);
    let mut agent = GemAgent::for_env(&env, config.hyper.clone(), variant, seed).map_err(|e| e.to_string())?;
    let mut evals = Vec::new();
    let mut errors = Vec::new();
    for t in 1..=config.budget() {
        let m = agent.train_step(&mut env).map_err(|e| e.to_string())?;
        if let Some(r) = m.episode_return {
            run.push(seed, t, format!("{prefix}episode_return"), r);
        }
        if t % config.log_every == 0 {
            let eval = agent
                .evaluate(&env, config.eval_episodes, config.eval_seed)
                .map_err(|e| e.to_string())?;
            let err = agent
                .estimation_error(&env, config.eval_episodes, config.eval_seed)
                .map_err(|e| e.to_string())?;
            run.push(seed, t, format!("{prefix}eval_return"), eval.mean);
            run.push(seed, t, format!("{prefix}estimation_error"), err);
            evals.push(eval.mean);
            errors.push(err);
        }
    }
    run.scalars
        .insert(format!("{prefix}final_eval_return"), tail_mean(&evals, FINAL_EVALS));
    run.scalars
        .insert(format!("{prefix}final_estimation_error"), tail_mean(&errors, FINAL_EVALS));
    Ok(())
}

fn finite_mdp(id: EnvId) -> Result<FiniteMdp, String> {
    id.finite_mdp()
        .ok_or_else(|| format!("{id} is not finite"))?
        .map_err(|e| e.to_string())
}

/// Sup-norm distance over non-terminal states.
fn q_error(mdp: &FiniteMdp, q: &QTable, q_star: &QTable) -> f64 {
    let mut worst: f64 = 0.0;
    for s in (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.num_actions() {
            worst = worst.max((q.get(s, a) - q_star.get(s, a)).abs());
        }
    }
    worst
}

fn tabular(config: &ExperimentConfig, seed: u64, run: &mut SeedRun) -> Result<(), String> {
    let id = config.env_id().ok_or("missing environment")?;
    let mdp = finite_mdp(id)?;
    let q_star = value_iteration(&mdp, 1e-12).map_err(|e| e.to_string())?;
    let mut tables = TwinQTable::new(mdp.num_states(), mdp.num_actions(), config.tabular.omega);
    let mut env = FiniteEnv::new(mdp.clone(), id.episode_cap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picker = TwinPicker::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut window = 0.0;
    let budget = config.budget();
    for ep in 1..=budget {
        let summary = tabular_gem_episode(&mut tables, &mut env, &config.tabular, &mut rng, &mut picker)
            .map_err(|e| e.to_string())?;
        window += summary.undiscounted_return;
        if ep % config.log_every == 0 || ep == budget {
            let span = ep - (ep - 1) / config.log_every * config.log_every;
            run.push(seed, ep, "mean_return", window / span as f64);
            run.push(seed, ep, "q_error", q_error(&mdp, &tables.average(), &q_star));
            window = 0.0;
        }
    }
    let sandwich = check_sandwich(&tables, &mdp).map_err(|e| e.to_string())?;
    let bound = check_performance_bound(&tables, &mdp).map_err(|e| e.to_string())?;
    let s = &mut run.scalars;
    s.insert("q_error".into(), q_error(&mdp, &tables.average(), &q_star));
    s.insert("sandwich_lower_violation".into(), sandwich.lower_violation);
    s.insert("sandwich_upper_violation".into(), sandwich.upper_violation);
    s.insert("mu".into(), bound.mu);
    s.insert("bound".into(), bound.bound);
    s.insert("realized_gap".into(), bound.realized_gap);
    s.insert("bound_violation".into(), bound.violation);
    Ok(())
}

/// Mean shortfall of greedy discounted returns against `V*` of the start state.
fn mfec_regret(table: &MfecTable, env: &FiniteEnv, q_star: &QTable, episodes: usize, seed: u64) -> f64 {
    let mut env = env.clone();
    env.reseed(seed);
    let gamma = env.mdp().gamma();
    let mut total = 0.0;
    for _ in 0..episodes {
        let start = env.reset();
        let mut s = start;
        let mut ret = 0.0;
        let mut discount = 1.0;
        loop {
            let out = env.step(&table.greedy(s));
            ret += discount * out.reward;
            discount *= gamma;
            if out.termination.is_done() {
                break;
            }
            s = out.next_state;
        }
        total += q_star.max(start) - ret;
    }
    total / episodes.max(1) as f64
}

fn mfec(config: &ExperimentConfig, seed: u64, run: &mut SeedRun) -> Result<(), String> {
    let id = config.env_id().ok_or("missing environment")?;
    let mdp = finite_mdp(id)?;
    let q_star = value_iteration(&mdp, 1e-12).map_err(|e| e.to_string())?;
    let mut table = MfecTable::new(mdp.num_states(), mdp.num_actions());
    let mut env = FiniteEnv::new(mdp, id.episode_cap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = config.budget();
    let episodes = config.eval_episodes.max(1);
    for ep in 1..=budget {
        let summary = mfec_episode(&mut table, &mut env, config.mfec_epsilon, &mut rng);
        run.push(seed, ep, "episode_return", summary.undiscounted_return);
        if ep % config.log_every == 0 || ep == budget {
            let regret = mfec_regret(&table, &env, &q_star, episodes, config.eval_seed);
            run.push(seed, ep, "greedy_regret", regret);
        }
    }
    let regret = mfec_regret(&table, &env, &q_star, episodes, config.eval_seed);
    run.scalars.insert("greedy_regret".into(), regret);
    Ok(())
}

fn bias_lab(config: &ExperimentConfig, seed: u64, run: &mut SeedRun) -> Result<(), String> {
    let traj = standard_trajectories()
        .into_iter()
        .find(|(n, _)| *n == config.bias.trajectory)
        .map(|(_, t)| t)
        .ok_or("unknown trajectory")?;
    let noise = NoiseModel::new(config.bias.family, config.bias.sigma).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = run_bias_experiment(&traj, noise, config.budget() as usize, &mut rng).map_err(|e| e.to_string())?;
    for s in &report.steps {
        let t = s.step as u64;
        run.push(seed, t, "single_bias", s.single_mean);
        run.push(seed, t, "single_stderr", s.single_stderr);
        run.push(seed, t, "twin_bias", s.twin_mean);
        run.push(seed, t, "twin_stderr", s.twin_stderr);
    }
    let first = report.steps[0];
    let worst_twin_z = report
        .steps
        .iter()
        .map(|s| if s.twin_stderr > 0.0 { s.twin_mean / s.twin_stderr } else { 0.0 })
        .fold(f64::NEG_INFINITY, f64::max);
    run.scalars.insert("single_bias_step0".into(), first.single_mean);
    run.scalars.insert(
        "single_z_step0".into(),
        if first.single_stderr > 0.0 { first.single_mean / first.single_stderr } else { 0.0 },
    );
    run.scalars.insert("twin_max_z".into(), worst_twin_z);
    Ok(())
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun, SeedFailure> {
    let mut run = SeedRun::new();
    let result = match config.kind {
        ExperimentKind::ContinuousGem => continuous(config, seed, Variant::Gem, "", &mut run),
        ExperimentKind::Ablation => continuous(config, seed, Variant::Gem, "gem.", &mut run).and_then(|_| {
            let variant = make_ablation(config.ablation.variant, config.ablation.n);
            continuous(config, seed, variant, "ablation.", &mut run)
        }),
        ExperimentKind::TabularGem => tabular(config, seed, &mut run),
        ExperimentKind::Mfec => mfec(config, seed, &mut run),
        ExperimentKind::BiasLab => bias_lab(config, seed, &mut run),
    };
    match result {
        Ok(()) => Ok(run),
        Err(message) => Err(SeedFailure { rows: run.rows, message }),
    }
}

fn count_line(passed: usize, total: usize, what: &str) -> (bool, String) {
    let ok = total > 0 && passed as f64 >= SEED_PASS_FRACTION * total as f64 - 1e-9;
    (ok, format!("{passed}/{total} seeds {what}: {}", if ok { "PASS" } else { "FAIL" }))
}

/// Per-seed checks and the overall call for a finished run.
pub fn verdict(kind: ExperimentKind, seeds: &[SeedSummary]) -> Verdict {
    let mut lines = Vec::new();
    let passed = match kind {
        ExperimentKind::ContinuousGem | ExperimentKind::Ablation => {
            let key = if kind == ExperimentKind::Ablation {
                "gem.final_eval_return"
            } else {
                "final_eval_return"
            };
            let mut above = 0;
            for s in seeds {
                let v = s.get(key);
                let ok = v > HAND_POLICY_MEDIAN_RETURN;
                above += usize::from(ok);
                lines.push(format!(
                    "seed {}: final eval return {v:.4} vs threshold {HAND_POLICY_MEDIAN_RETURN:.4} {}",
                    s.seed,
                    if ok { "above" } else { "below" }
                ));
            }
            let (mut ok, line) = count_line(above, seeds.len(), "above threshold");
            lines.push(line);
            if kind == ExperimentKind::Ablation {
                let mut higher = 0;
                for s in seeds {
                    let (g, a) = (s.get("gem.final_estimation_error"), s.get("ablation.final_estimation_error"));
                    higher += usize::from(a > g);
                    lines.push(format!("seed {}: estimation error gem {g:.4} ablation {a:.4}", s.seed));
                }
                let (ok2, line) = count_line(higher, seeds.len(), "with larger ablation error");
                lines.push(line);
                ok &= ok2;
            }
            ok
        }
        ExperimentKind::TabularGem => {
            let mut all = true;
            for s in seeds {
                let e = s.get("q_error");
                let ok = e < TABULAR_TOLERANCE;
                all &= ok;
                lines.push(format!(
                    "seed {}: q error {e:.6} (tolerance {TABULAR_TOLERANCE}) {}",
                    s.seed,
                    if ok { "PASS" } else { "FAIL" }
                ));
            }
            all
        }
        ExperimentKind::Mfec => {
            for s in seeds {
                lines.push(format!("seed {}: greedy regret {:.6}", s.seed, s.get("greedy_regret")));
            }
            true
        }
        ExperimentKind::BiasLab => {
            let mut all = true;
            for s in seeds {
                let z = s.get("twin_max_z");
                let ok = z <= 3.0;
                all &= ok;
                lines.push(format!(
                    "seed {}: twin bias max z {z:.3} {}; single bias z at step 0 {:.3}",
                    s.seed,
                    if ok { "PASS" } else { "FAIL" },
                    s.get("single_z_step0")
                ));
            }
            all
        }
    };
    lines.push(format!("overall: {}", if passed { "PASS" } else { "FAIL" }));
    Verdict { passed, lines }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["seed", "step", "metric", "value"])
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    for r in rows {
        w.write_record([r.seed.to_string(), r.step.to_string(), r.metric.clone(), r.value.to_string()])
            .map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Mean and sample standard deviation across seeds for every `(metric, step)`
/// that all seeds logged, ordered by metric then step.
pub fn aggregate(per_seed: &[Vec<MetricsRow>]) -> Vec<(String, u64, usize, f64, f64)> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for rows in per_seed {
        for r in rows {
            groups.entry((r.metric.clone(), r.step)).or_default().push(r.value);
        }
    }
    groups
        .into_iter()
        .filter(|(_, v)| v.len() == per_seed.len())
        .map(|((metric, step), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            (metric, step, n, mean, std)
        })
        .collect()
}

fn write_aggregate(path: &Path, per_seed: &[Vec<MetricsRow>]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| HarnessError::Csv(e.to_string());
    w.write_record(["metric", "step", "n", "mean", "std"]).map_err(csv_err)?;
    for (metric, step, n, mean, std) in aggregate(per_seed) {
        w.write_record([metric, step.to_string(), n.to_string(), mean.to_string(), std.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn seed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

/// Runs every seed of a validated config, seeds in parallel, and writes:
///
/// * `resolved_config.json`, the full config after defaults and overrides;
/// * `seed_<N>.csv` per finished seed (`seed_<N>.partial.csv` for a failed one);
/// * `aggregate.csv` and `verdict.txt` when every seed finished;
/// * `failure.json` when some seed failed.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let problems = validate(config);
    if !problems.is_empty() {
        return Err(HarnessError::Config(ConfigError::Invalid(problems)));
    }
    let out = PathBuf::from(&config.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let resolved = out.join("resolved_config.json");
    let mut text = serde_json::to_string_pretty(config).expect("config serializes");
    text.push('\n');
    fs::write(&resolved, text).map_err(io_err(&resolved))?;

    let results: Vec<(u64, Result<SeedRun, SeedFailure>)> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let result = run_seed(config, seed);
            let written = match &result {
                Ok(run) => write_rows(&out.join(seed_csv_name(seed)), &run.rows),
                Err(f) => write_rows(&out.join(format!("seed_{seed}.partial.csv")), &f.rows),
            };
            // Each seed's file is written as soon as it ends, so a failure
            // elsewhere keeps it.
            let result = match written {
                Ok(()) => result,
                Err(e) => Err(SeedFailure {
                    rows: Vec::new(),
                    message: e.to_string(),
                }),
            };
            (seed, result)
        })
        .collect();

    let failures: Vec<(u64, &str)> = results
        .iter()
        .filter_map(|(s, r)| r.as_ref().err().map(|f| (*s, f.message.as_str())))
        .collect();
    if !failures.is_empty() {
        let completed: Vec<u64> = results.iter().filter(|(_, r)| r.is_ok()).map(|(s, _)| *s).collect();
        let manifest = serde_json::json!({
            "kind": config.kind,
            "completed_seeds": completed,
            "failures": failures.iter().map(|(s, m)| serde_json::json!({"seed": s, "error": m})).collect::<Vec<_>>(),
        });
        let path = out.join("failure.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        let (seed, message) = failures[0];
        return Err(HarnessError::Runtime {
            seed,
            message: message.to_string(),
        });
    }

    let mut per_seed = Vec::new();
    let mut seeds = Vec::new();
    for (seed, r) in results {
        let run = r.unwrap_or_else(|_| unreachable!("failures handled above"));
        seeds.push(SeedSummary {
            seed,
            scalars: run.scalars,
        });
        per_seed.push(run.rows);
    }
    write_aggregate(&out.join("aggregate.csv"), &per_seed)?;
    let verdict = verdict(config.kind, &seeds);
    let path = out.join("verdict.txt");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "kind: {}", config.kind).map_err(io_err(&path))?;
    for line in &verdict.lines {
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(RunSummary {
        out_dir: out,
        seeds,
        verdict,
    })
}
