use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gem_core::harness::{
    load_config, run, validate, ConfigError, ExperimentConfig, ExperimentKind, HarnessError, Overrides, EXIT_CONFIG,
    EXIT_RUNTIME,
};

fn config_in(dir: &Path, json: &str) -> ExperimentConfig {
    let overrides = Overrides {
        out: Some(dir.to_string_lossy().into_owned()),
        ..Default::default()
    };
    load_config(json, &overrides).unwrap()
}

fn read_rows(path: &Path) -> Vec<(u64, u64, String, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].to_string(), rec[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn bias_lab_run_writes_the_file_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path(), r#"{"kind": "bias-lab", "seeds": [1, 2], "budget": 2000}"#);
    let summary = run(&config).unwrap();
    for name in ["seed_1.csv", "seed_2.csv", "aggregate.csv", "verdict.txt", "resolved_config.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(!dir.path().join("failure.json").exists());
    assert!(summary.verdict.passed, "{:?}", summary.verdict);
    let verdict = fs::read_to_string(dir.path().join("verdict.txt")).unwrap();
    assert!(verdict.starts_with("kind: bias-lab\n"));
    assert!(verdict.trim_end().ends_with("overall: PASS"));
    let header = fs::read_to_string(dir.path().join("seed_1.csv")).unwrap();
    assert!(header.starts_with("seed,step,metric,value\n"));
}

#[test]
fn resolved_config_reloads_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path(), r#"{"kind": "mfec", "seeds": [4], "budget": 50, "hyper": {"tau": 0.3}}"#);
    run(&config).unwrap();
    let text = fs::read_to_string(dir.path().join("resolved_config.json")).unwrap();
    let again = load_config(&text, &Overrides::default()).unwrap();
    assert_eq!(again, config);
    assert_eq!(again.hyper.tau, 0.3);
    assert_eq!(again.env.as_deref(), None);
}

fn all_csv(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let configs = [
        r#"{"kind": "bias-lab", "seeds": [3, 9], "budget": 1500, "bias": {"trajectory": "dense"}}"#,
        r#"{"kind": "tabular-gem", "env": "random-mdp", "seeds": [1, 2], "budget": 300, "log_every": 50}"#,
        r#"{"kind": "mfec", "env": "chain", "seeds": [5], "budget": 200, "log_every": 20}"#,
        r#"{"kind": "continuous-gem", "seeds": [7, 8], "budget": 1400, "log_every": 700,
            "hyper": {"warmup_steps": 300, "hidden": [8], "update_period": 50, "batch_size": 16}}"#,
    ];
    for json in configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&config_in(a.path(), json)).unwrap();
        run(&config_in(b.path(), json)).unwrap();
        let (ca, cb) = (all_csv(a.path()), all_csv(b.path()));
        assert!(ca.len() >= 2, "{json}");
        assert_eq!(ca, cb, "{json}");
    }
}

#[test]
fn aggregate_is_recomputable_from_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(
        dir.path(),
        r#"{"kind": "tabular-gem", "env": "chain", "seeds": [1, 2, 3], "budget": 200, "log_every": 40}"#,
    );
    run(&config).unwrap();
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for seed in [1, 2, 3] {
        for (s, step, metric, value) in read_rows(&dir.path().join(format!("seed_{seed}.csv"))) {
            assert_eq!(s, seed);
            groups.entry((metric, step)).or_default().push(value);
        }
    }
    let mut r = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["metric", "step", "n", "mean", "std"]);
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let v = &groups[&(rec[0].to_string(), rec[1].parse().unwrap())];
        let mean = v.iter().sum::<f64>() / 3.0;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert_eq!(rec[2].parse::<usize>().unwrap(), 3);
        assert_eq!(rec[3].parse::<f64>().unwrap(), mean);
        assert_eq!(rec[4].parse::<f64>().unwrap(), std);
        seen += 1;
    }
    assert_eq!(seen, groups.len());
}

#[test]
fn tabular_gridworld_run_converges() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path(), r#"{"kind": "tabular-gem", "seeds": [1], "log_every": 5000}"#);
    assert_eq!(config.budget(), 20_000);
    let summary = run(&config).unwrap();
    let rows = read_rows(&dir.path().join("seed_1.csv"));
    let last = rows.iter().rev().find(|r| r.2 == "q_error").unwrap();
    assert_eq!(last.1, 20_000);
    assert!(last.3 < 0.01, "{last:?}");
    assert!(summary.verdict.passed);
}

#[test]
fn steps_in_each_metric_are_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path(), r#"{"kind": "mfec", "seeds": [2], "budget": 120, "log_every": 25}"#);
    run(&config).unwrap();
    let mut last: BTreeMap<String, u64> = BTreeMap::new();
    for (_, step, metric, _) in read_rows(&dir.path().join("seed_2.csv")) {
        if let Some(prev) = last.insert(metric, step) {
            assert!(step > prev);
        }
    }
}

#[test]
fn range_problem_reports_its_line() {
    let src = "{\n  \"kind\": \"continuous-gem\",\n  \"hyper\": {\n    \"tau\": 1.5\n  }\n}\n";
    match load_config(src, &Overrides::default()) {
        Err(ConfigError::Invalid(problems)) => {
            assert_eq!(problems.len(), 1);
            assert_eq!(problems[0].path, "hyper.tau");
            assert_eq!(problems[0].line, Some(4));
            assert!(problems[0].to_string().starts_with("line 4: hyper.tau"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let src = "{\n  \"kind\": \"mfec\",\n  \"sedes\": [1]\n}";
    match load_config(src, &Overrides::default()) {
        Err(ConfigError::Parse(p)) => {
            assert_eq!(p.line, Some(3), "{p}");
            assert!(p.message.contains("sedes"));
        }
        other => panic!("{other:?}"),
    }
    match load_config("{\n  \"kind\": \"tabular\"\n}", &Overrides::default()) {
        Err(ConfigError::Parse(p)) => assert_eq!(p.line, Some(2)),
        other => panic!("{other:?}"),
    }
    match load_config("{\n  \"kind\": \n", &Overrides::default()) {
        Err(ConfigError::Parse(p)) => assert!(p.line.is_some()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn env_typo_gets_a_suggestion() {
    let src = "{\n  \"kind\": \"tabular-gem\",\n  \"env\": \"gridwold5\"\n}";
    let Err(ConfigError::Invalid(problems)) = load_config(src, &Overrides::default()) else {
        panic!("typo accepted");
    };
    assert!(problems[0].message.contains("did you mean `gridworld5`"));
    assert_eq!(problems[0].line, Some(3));
}

#[test]
fn kind_and_env_must_agree() {
    let mut c = ExperimentConfig::for_kind(ExperimentKind::TabularGem);
    c.env = Some("pointmass".into());
    assert_eq!(validate(&c).len(), 1);
    let mut c = ExperimentConfig::for_kind(ExperimentKind::ContinuousGem);
    c.env = Some("chain".into());
    assert_eq!(validate(&c).len(), 1);
}

#[test]
fn overrides_replace_file_keys() {
    let overrides = Overrides {
        seed: Some(42),
        budget: Some(77),
        env: Some("chain".into()),
        out: Some("elsewhere".into()),
        set: vec!["tabular.epsilon=0.05".into(), "hyper.hidden=[16,16]".into(), "bias.trajectory=spike".into()],
    };
    let c = load_config(r#"{"kind": "tabular-gem", "seeds": [1, 2], "env": "gridworld5"}"#, &overrides).unwrap();
    assert_eq!(c.seeds, vec![42]);
    assert_eq!(c.budget(), 77);
    assert_eq!(c.env.as_deref(), Some("chain"));
    assert_eq!(c.out, "elsewhere");
    assert_eq!(c.tabular.epsilon, 0.05);
    assert_eq!(c.hyper.hidden, vec![16, 16]);
    assert_eq!(c.bias.trajectory, "spike");
    let bad = Overrides {
        set: vec!["no-equals-sign".into()],
        ..Default::default()
    };
    assert!(matches!(load_config("{}", &bad), Err(ConfigError::Parse(_))));
}

#[test]
fn runtime_failure_leaves_a_manifest_and_partial_rows() {
    let dir = tempfile::tempdir().unwrap();
    // Memory smaller than one 200-step episode fails mid-run, which the
    // static checks cannot see.
    let config = config_in(
        dir.path(),
        r#"{"kind": "continuous-gem", "seeds": [1], "budget": 400, "log_every": 100,
            "hyper": {"memory_capacity": 150, "warmup_steps": 50, "hidden": [4]}}"#,
    );
    let err = run(&config).unwrap_err();
    assert!(matches!(err, HarnessError::Runtime { seed: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), EXIT_RUNTIME);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("failure.json")).unwrap()).unwrap();
    assert_eq!(manifest["failures"][0]["seed"], 1);
    assert!(dir.path().join("resolved_config.json").is_file());
    assert!(!read_rows(&dir.path().join("seed_1.partial.csv")).is_empty());
    assert!(!dir.path().join("aggregate.csv").exists());
}

#[test]
fn invalid_config_maps_to_the_config_exit_code() {
    let mut c = ExperimentConfig::for_kind(ExperimentKind::Mfec);
    c.seeds.clear();
    let err = run(&c).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn seed_seven_clears_the_hand_policy_bar() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(&config_in(dir.path(), r#"{"kind": "continuous-gem", "seeds": [7]}"#)).unwrap();
    let final_return = summary.seeds[0].get("final_eval_return");
    assert!(
        final_return > gem_core::env::HAND_POLICY_MEDIAN_RETURN,
        "final eval return {final_return}"
    );
    assert!(summary.verdict.passed);
}
