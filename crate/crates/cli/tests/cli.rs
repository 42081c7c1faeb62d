use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use tubeplan_cli::benchmark::benchmark_command;
use tubeplan_cli::commands;
use tubeplan_cli::config::{Experiment, ExperimentConfig};
use tubeplan_cli::error::ErrorKind;
use tubeplan_cli::pipeline::{run_pipeline, StageOutcome, STAGES};

const CONFIG: &str = r#"
seed = 3
risk = 0.05

[system]
preset = "double_integrator"

[noise]
scale = 0.01

[data]
samples = 2000
taus = [0, 2, 5, 10]

[tube]
beta = 0.05
cluster_k = 20
t_max = 60
layout = "projected"

[environment]
family = "scattered"
size = 30.0
goal_radius = 4.0
start = [3.0, 15.0, 0.0, 0.0]

[planner]
checker = "hybrid"
max_iterations = 5000
state_lo = [0.0, 0.0, -3.0, -3.0]
state_hi = [30.0, 30.0, 3.0, 3.0]
control_lo = [-3.0, -3.0]
control_hi = [3.0, 3.0]

[validate]
rollouts = 1000

[benchmark]
trials = 2
checkers = ["lazy", "bandit"]
"#;

fn experiment(text: &str) -> Experiment {
    Experiment::resolve(ExperimentConfig::parse(text).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tubeplan(args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tubeplan"));
    cmd.args(args).env_remove("TUBEPLAN_SEED").env_remove("TUBEPLAN_BUDGET");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn pipeline_cache_tracks_inputs_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(CONFIG);
    let first = run_pipeline(&exp, dir.path()).unwrap();
    for s in STAGES {
        assert_eq!(first.outcome(s), Some(StageOutcome::Ran), "{s}");
    }
    let again = run_pipeline(&exp, dir.path()).unwrap();
    for s in STAGES {
        assert_eq!(again.outcome(s), Some(StageOutcome::CacheHit), "{s}");
    }

    // A larger goal changes only the environment.
    let moved = experiment(&CONFIG.replace("goal_radius = 4.0", "goal_radius = 4.5"));
    let s = run_pipeline(&moved, dir.path()).unwrap();
    for stage in ["gen-data", "learn-tube", "learn-confidence"] {
        assert_eq!(s.outcome(stage), Some(StageOutcome::CacheHit), "{stage}");
    }
    assert_eq!(s.outcome("plan"), Some(StageOutcome::Ran));
    assert_eq!(s.outcome("validate"), Some(StageOutcome::Ran));

    let path = dir.path().join("data/anchor_5.f64");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let err = run_pipeline(&moved, dir.path()).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Integrity);
    assert!(err.message.contains("hash mismatch") && err.message.contains("anchor_5"), "{}", err.message);
}

#[test]
fn separate_stages_reproduce_the_pipeline_bit_for_bit() {
    let exp = experiment(CONFIG);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run_pipeline(&exp, a.path()).unwrap();
    run_pipeline(&exp, b.path()).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));

    let out = c.path();
    commands::gen_data(&exp, &out.join("data")).unwrap();
    commands::learn_tube(&exp, &out.join("data"), out).unwrap();
    commands::learn_confidence(&exp, &out.join("tube.json"), out).unwrap();
    commands::plan_command(&exp, &out.join("tube.json"), Some(&out.join("confidence.json")), out).unwrap();
    commands::validate_command(&exp, &out.join("plan.json"), Some(&out.join("tube.json")), out).unwrap();
    let mut piped = snapshot(a.path());
    piped.remove("manifest.json");
    assert_eq!(snapshot(out), piped);
}

#[test]
fn every_table_row_carries_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(CONFIG);
    run_pipeline(&exp, dir.path()).unwrap();
    benchmark_command(&exp, &dir.path().join("tube.json"), Some(&dir.path().join("confidence.json")), dir.path(), false).unwrap();
    let hash = exp.config_hash();
    for name in ["sawtooth.csv", "tree.csv", "report.csv", "benchmark.csv", "timings.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("config_hash,seed,"), "{name}");
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], hash, "{name}");
            assert!(cols[1].parse::<u64>().is_ok(), "{name}");
        }
    }
}

#[test]
fn benchmark_tables_are_deterministic_and_trivial_cases_hold() {
    let open = CONFIG.replace("family = \"scattered\"", "family = \"open\"").replace("trials = 2", "trials = 1");
    let exp = experiment(&open);
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&exp, dir.path()).unwrap();
    let tube = dir.path().join("tube.json");
    let conf = dir.path().join("confidence.json");
    let r1 = benchmark_command(&exp, &tube, Some(&conf), &dir.path().join("b1"), true).unwrap();
    let r2 = benchmark_command(&exp, &tube, Some(&conf), &dir.path().join("b2"), false).unwrap();
    for c in &r1.table.summary {
        assert_eq!(c.success_rate, 1.0, "{c:?}");
    }
    assert_eq!(r1.table, r2.table);
    for f in ["benchmark.csv", "benchmark.json"] {
        assert_eq!(std::fs::read(dir.path().join("b1").join(f)).unwrap(), std::fs::read(dir.path().join("b2").join(f)).unwrap());
    }
    assert!(dir.path().join("b1/trials/open_lazy_0/plan.json").exists());

    // Lazy balls cannot pass a gap narrower than their diameter.
    let narrow = CONFIG
        .replace("checkers = [\"lazy\", \"bandit\"]", "checkers = [\"lazy\"]")
        .replace("max_iterations = 5000", "max_iterations = 3000")
        .replace("family = \"scattered\"", "family = \"narrow\"\nwidth = 0.3");
    let exp = experiment(&narrow);
    let r = benchmark_command(&exp, &tube, Some(&conf), &dir.path().join("b3"), false).unwrap();
    assert_eq!(r.table.summary[0].solved, 0);
    let missing = benchmark_command(&exp, &dir.path().join("nope.json"), Some(&conf), dir.path(), false).unwrap_err();
    assert_eq!(missing.kind, ErrorKind::Config);
}

#[test]
fn exit_codes_distinguish_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let (code, text) = tubeplan(&["pipeline", "--config", cfg, "--out-dir", out], &[]);
    assert_eq!(code, 0, "{text}");

    // One iteration cannot reach the goal.
    let (code, text) = tubeplan(&["plan", "--config", cfg, "--out-dir", out, "--budget", "1"], &[]);
    assert_eq!(code, 2, "{text}");
    let (code, text) = tubeplan(&["plan", "--config", cfg, "--out-dir", out], &[("TUBEPLAN_BUDGET", "1")]);
    assert_eq!(code, 2, "{text}");
    // The flag outranks the environment variable.
    let (code, text) = tubeplan(&["plan", "--config", cfg, "--out-dir", out, "--budget", "5000"], &[("TUBEPLAN_BUDGET", "1")]);
    assert_eq!(code, 0, "{text}");

    // Start inside the lower-left block of the scattered layout.
    let inside = dir.path().join("inside.toml");
    std::fs::write(&inside, CONFIG.replace("start = [3.0, 15.0, 0.0, 0.0]", "start = [10.5, 4.0, 0.0, 0.0]")).unwrap();
    let (code, text) = tubeplan(&["plan", "--config", inside.to_str().unwrap(), "--out-dir", out], &[]);
    assert_eq!(code, 3, "{text}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("risk = 0.05", "")).unwrap();
    let (code, text) = tubeplan(&["plan", "--config", bad.to_str().unwrap(), "--out-dir", out], &[]);
    assert_eq!(code, 4, "{text}");
    let (code, _) = tubeplan(&["plan", "--config", cfg, "--out-dir", out, "--p-safe", "1.5"], &[]);
    assert_eq!(code, 4);
    let (code, _) = tubeplan(&["plan", "--config", cfg, "--out-dir", out], &[("TUBEPLAN_SEED", "x")]);
    assert_eq!(code, 4);

    std::fs::write(dir.path().join("run/tube.json"), "{ truncated").unwrap();
    let (code, text) = tubeplan(&["plan", "--config", cfg, "--out-dir", out], &[]);
    assert_eq!(code, 5, "{text}");
}

#[test]
fn checker_flag_and_risk_flag_reach_the_planner() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(tubeplan(&["pipeline", "--config", cfg, "--out-dir", out], &[]).0, 0);
    let (code, text) = tubeplan(&["plan", "--config", cfg, "--out-dir", out, "--checker", "exact", "--risk", "0.05"], &[]);
    assert_eq!(code, 0, "{text}");
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["checker"], "exact");
    assert_eq!(stats["stats"]["checker"]["lazy_calls"], 0);
    // The stored confidence tubes were sized for 0.95.
    let (code, _) = tubeplan(&["plan", "--config", cfg, "--out-dir", out, "--checker", "lazy", "--p-safe", "0.9"], &[]);
    assert_eq!(code, 4);
}
