use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AblationKind, HyperParams};
use crate::biaslab::{standard_trajectories, NoiseFamily, MIN_SAMPLES};
use crate::env::EnvId;
use crate::tabular::TabularConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ContinuousGem,
    TabularGem,
    Mfec,
    BiasLab,
    Ablation,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::ContinuousGem,
        ExperimentKind::TabularGem,
        ExperimentKind::Mfec,
        ExperimentKind::BiasLab,
        ExperimentKind::Ablation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::ContinuousGem => "continuous-gem",
            ExperimentKind::TabularGem => "tabular-gem",
            ExperimentKind::Mfec => "mfec",
            ExperimentKind::BiasLab => "bias-lab",
            ExperimentKind::Ablation => "ablation",
        }
    }

    pub fn default_env(self) -> Option<EnvId> {
        match self {
            ExperimentKind::ContinuousGem | ExperimentKind::Ablation => Some(EnvId::PointMass),
            ExperimentKind::TabularGem | ExperimentKind::Mfec => Some(EnvId::Gridworld5),
            ExperimentKind::BiasLab => None,
        }
    }

    /// Environment steps, episodes, or Monte Carlo samples, by kind.
    pub fn default_budget(self) -> u64 {
        match self {
            ExperimentKind::ContinuousGem | ExperimentKind::Ablation => 30_000,
            ExperimentKind::TabularGem => 20_000,
            ExperimentKind::Mfec => 5_000,
            ExperimentKind::BiasLab => 10_000,
        }
    }

    pub fn budget_unit(self) -> &'static str {
        match self {
            ExperimentKind::ContinuousGem | ExperimentKind::Ablation => "steps",
            ExperimentKind::TabularGem | ExperimentKind::Mfec => "episodes",
            ExperimentKind::BiasLab => "samples",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub variant: AblationKind,
    /// Rollout length of the n-step variant.
    pub n: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            variant: AblationKind::NoTbp,
            n: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    /// Name from the standard trajectory suite.
    pub trajectory: String,
    pub family: NoiseFamily,
    pub sigma: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            trajectory: "flat".into(),
            family: NoiseFamily::Gaussian,
            sigma: 1.0,
        }
    }
}

/// One experiment: what to run, where, on which seeds, and with which knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Environment id; the kind's default when absent.
    pub env: Option<String>,
    pub seeds: Vec<u64>,
    /// Steps, episodes or samples depending on the kind.
    pub budget: Option<u64>,
    pub out: String,
    /// Steps (continuous) or episodes (tabular) between metric rows.
    pub log_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub hyper: HyperParams,
    pub tabular: TabularConfig,
    pub mfec_epsilon: f64,
    pub ablation: AblationSpec,
    pub bias: BiasSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_kind(ExperimentKind::ContinuousGem)
    }
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let log_every = match kind {
            ExperimentKind::ContinuousGem | ExperimentKind::Ablation => 1000,
            ExperimentKind::TabularGem | ExperimentKind::Mfec => 500,
            ExperimentKind::BiasLab => 1,
        };
        Self {
            kind,
            env: None,
            seeds: vec![1, 2, 3, 4, 5],
            budget: None,
            out: "runs".into(),
            log_every,
            eval_episodes: 10,
            eval_seed: 10_007,
            hyper: match kind {
                ExperimentKind::ContinuousGem | ExperimentKind::Ablation => HyperParams::pointmass(),
                _ => HyperParams::default(),
            },
            tabular: TabularConfig::default(),
            mfec_epsilon: 0.1,
            ablation: AblationSpec::default(),
            bias: BiasSpec::default(),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget.unwrap_or_else(|| self.kind.default_budget())
    }

    /// The environment, when the id is known (always after validation).
    pub fn env_id(&self) -> Option<EnvId> {
        match &self.env {
            Some(s) => s.parse().ok(),
            None => self.kind.default_env(),
        }
    }
}

/// A validation finding: dotted key path, message, and the 1-based line of
/// the key in the source file when it can be located.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Problem {
    pub path: String,
    pub message: String,
    pub line: Option<usize>,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

fn problem(path: impl Into<String>, message: impl Into<String>) -> Problem {
    Problem {
        path: path.into(),
        message: message.into(),
        line: None,
    }
}

/// Schema and range checks. An empty list means the config is runnable.
pub fn validate(config: &ExperimentConfig) -> Vec<Problem> {
    let mut out = Vec::new();
    let kind = config.kind;
    if let Some(env) = &config.env {
        match env.parse::<EnvId>() {
            Err(e) => out.push(problem("env", e.to_string())),
            Ok(id) if kind == ExperimentKind::BiasLab => {
                out.push(problem("env", format!("bias-lab uses synthetic trajectories; drop `{id}`")))
            }
            Ok(id) if matches!(kind, ExperimentKind::ContinuousGem | ExperimentKind::Ablation) && id.is_finite() => {
                out.push(problem("env", format!("{kind} needs a continuous environment, `{id}` is finite")))
            }
            Ok(id) if matches!(kind, ExperimentKind::TabularGem | ExperimentKind::Mfec) && !id.is_finite() => {
                out.push(problem("env", format!("{kind} needs a finite environment, `{id}` is continuous")))
            }
            Ok(_) => {}
        }
    }
    if config.seeds.is_empty() {
        out.push(problem("seeds", "at least one seed is required"));
    }
    let mut sorted = config.seeds.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        out.push(problem("seeds", "seeds must be distinct"));
    }
    if config.budget == Some(0) {
        out.push(problem("budget", format!("must be at least 1 {}", kind.budget_unit())));
    }
    if kind == ExperimentKind::BiasLab && config.budget() < MIN_SAMPLES as u64 {
        out.push(problem("budget", format!("bias-lab needs at least {MIN_SAMPLES} samples")));
    }
    if config.log_every == 0 {
        out.push(problem("log_every", "must be at least 1"));
    }
    if config.out.trim().is_empty() {
        out.push(problem("out", "output directory must not be empty"));
    }
    if matches!(kind, ExperimentKind::ContinuousGem | ExperimentKind::Ablation) && config.eval_episodes == 0 {
        out.push(problem("eval_episodes", "must be at least 1"));
    }
    for (field, msg) in config.hyper.problems() {
        out.push(problem(format!("hyper.{field}"), msg));
    }
    for (field, msg) in config.tabular.problems() {
        out.push(problem(format!("tabular.{field}"), msg));
    }
    if !(0.0..=1.0).contains(&config.mfec_epsilon) {
        out.push(problem("mfec_epsilon", format!("must lie in [0, 1], got {}", config.mfec_epsilon)));
    }
    if config.ablation.variant == AblationKind::Nstep && config.ablation.n == 0 {
        out.push(problem("ablation.n", "n-step length must be at least 1"));
    }
    let names: Vec<&str> = standard_trajectories().iter().map(|(n, _)| *n).collect();
    if !names.contains(&config.bias.trajectory.as_str()) {
        let hint = names
            .iter()
            .map(|n| (strsim::levenshtein(&config.bias.trajectory, n), *n))
            .filter(|(d, _)| *d <= 3)
            .min_by_key(|(d, _)| *d)
            .map(|(_, n)| format!("; did you mean `{n}`?"))
            .unwrap_or_default();
        out.push(problem(
            "bias.trajectory",
            format!("unknown trajectory `{}` (known: {}){hint}", config.bias.trajectory, names.join(", ")),
        ));
    }
    if !(config.bias.sigma.is_finite() && config.bias.sigma >= 0.0) {
        out.push(problem("bias.sigma", format!("must be finite and non-negative, got {}", config.bias.sigma)));
    }
    out
}

/// Line of the first occurrence of the last key of `path` after the
/// occurrences of its parents, if the source mentions it.
fn locate(source: &str, path: &str) -> Option<usize> {
    let mut from = 0;
    for key in path.split('.') {
        let needle = format!("\"{key}\"");
        from += source[from..].find(&needle)?;
    }
    Some(source[..from].matches('\n').count() + 1)
}

/// Outcome of reading a config file.
#[derive(Debug)]
pub enum ConfigError {
    /// Not JSON, or a key or value the schema rejects.
    Parse(Problem),
    /// Well-formed but out of range.
    Invalid(Vec<Problem>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(p) => write!(f, "{p}"),
            ConfigError::Invalid(ps) => {
                for (i, p) in ps.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line overrides, applied on top of the file before parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<u64>,
    pub env: Option<String>,
    pub out: Option<String>,
    /// `key=value` pairs; dotted keys reach into sections and values are read
    /// as JSON, falling back to a plain string.
    pub set: Vec<String>,
}

fn apply_overrides(root: &mut Value, overrides: &Overrides) -> Result<(), Problem> {
    let obj = root
        .as_object_mut()
        .ok_or_else(|| problem("<root>", "config must be a JSON object"))?;
    if let Some(seed) = overrides.seed {
        obj.insert("seeds".into(), Value::from(vec![seed]));
    }
    if let Some(b) = overrides.budget {
        obj.insert("budget".into(), Value::from(b));
    }
    if let Some(env) = &overrides.env {
        obj.insert("env".into(), Value::from(env.clone()));
    }
    if let Some(out) = &overrides.out {
        obj.insert("out".into(), Value::from(out.clone()));
    }
    for pair in &overrides.set {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| problem("--set", format!("expected key=value, got `{pair}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
        let mut node = &mut *root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let map = node
                .as_object_mut()
                .ok_or_else(|| problem(key, "cannot descend into a non-object"))?;
            node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| problem(key, "cannot descend into a non-object"))?
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

/// Parse `source`, apply overrides, and validate. Keys absent from the file
/// take the defaults of the file's `kind`.
pub fn load_config(source: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut root: Value = serde_json::from_str(source).map_err(|e| {
        ConfigError::Parse(Problem {
            path: "<file>".into(),
            message: e.to_string(),
            line: Some(e.line()),
        })
    })?;
    apply_overrides(&mut root, overrides).map_err(ConfigError::Parse)?;
    let kind = match root.get("kind") {
        None => ExperimentKind::ContinuousGem,
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
            let known: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
            ConfigError::Parse(Problem {
                path: "kind".into(),
                message: format!("unknown kind {v} (known: {})", known.join(", ")),
                line: locate(source, "kind"),
            })
        })?,
    };
    let mut merged = serde_json::to_value(ExperimentConfig::for_kind(kind)).expect("defaults serialize");
    merge(&mut merged, root);
    let config: ExperimentConfig = serde_json::from_value(merged).map_err(|e| {
        let msg = e.to_string();
        // serde names the offending field in backticks; point at it.
        let key = msg.split('`').nth(1).unwrap_or("");
        ConfigError::Parse(Problem {
            path: if key.is_empty() { "<file>".into() } else { key.into() },
            line: if key.is_empty() { None } else { locate(source, key) },
            message: msg,
        })
    })?;
    let mut problems = validate(&config);
    if problems.is_empty() {
        return Ok(config);
    }
    for p in &mut problems {
        p.line = locate(source, &p.path);
    }
    Err(ConfigError::Invalid(problems))
}

/// Deep-merge `patch` into `base`; objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_kind() {
        for kind in ExperimentKind::ALL {
            assert!(validate(&ExperimentConfig::for_kind(kind)).is_empty(), "{kind}");
        }
    }

    #[test]
    fn locate_follows_nesting() {
        let src = "{\n  \"tau\": 1,\n  \"hyper\": {\n    \"tau\": 1.5\n  }\n}";
        assert_eq!(locate(src, "hyper.tau"), Some(4));
        assert_eq!(locate(src, "tau"), Some(2));
        assert_eq!(locate(src, "gamma"), None);
    }

    #[test]
    fn merge_is_deep() {
        let mut base = serde_json::json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, serde_json::json!({"a": {"y": 5}}));
        assert_eq!(base, serde_json::json!({"a": {"x": 1, "y": 5}, "b": 3}));
    }
}
