use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mock_config() -> Value {
    json!({
        "concepts": [
            {"concept_id": "cat", "name": "cat"},
            {"concept_id": "kite", "name": "kite"}
        ],
        "hirpg": {"branching": 3, "depth": 2, "prompt_budget": 10, "seed": 3},
        "llm": {"kind": "mock", "seed": 3},
        "generators": [
            {"generator_id": "a", "kind": "mock"},
            {"generator_id": "b", "kind": "mock", "noise_sigma": 0.5}
        ],
        "synthetic": {"seed": 3},
        "selection": {"seed": 3},
        "learner": {"learning_rate": 0.5, "batch_size": 4, "memory_capacity": 8, "seed": 3},
        "eval_every": 4,
        "feature_dim": 8,
        "eval_data": {"kind": "synthetic", "per_concept": 12},
        "paths": {"workdir": "out"}
    })
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", config.to_str().unwrap()]);
        gencl(&full)
    }
}

fn gencl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gencl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn prompts_writes_one_tree_per_concept() {
    let ws = Workspace::new(&mock_config());
    let o = ws.run(&["prompts"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trees: Value = serde_json::from_str(&read(&ws.out("prompts.json"))).unwrap();
    let trees = trees.as_array().unwrap();
    assert_eq!(trees.len(), 2);
    assert_eq!(trees[0]["concept"], "cat");
    assert_eq!(
        (trees[0]["k"].as_u64(), trees[0]["d"].as_u64()),
        (Some(3), Some(2))
    );
    assert_eq!(trees[0]["nodes"].as_array().unwrap().len(), 13);
    assert_eq!(trees[0]["nodes"][0]["text"], "A photo of cat");
}

#[test]
fn stages_chain_through_files_and_rerun_identically() {
    let ws = Workspace::new(&mock_config());
    for stage in ["prompts", "generate", "select"] {
        let o = ws.run(&[stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let outputs = ["prompts.json", "features.jsonl", "coreset.json"];
    let first: Vec<String> = outputs.iter().map(|f| read(&ws.out(f))).collect();
    assert_eq!(first[1].lines().count(), 2 * 2 * 10);
    for stage in ["prompts", "generate", "select"] {
        assert_eq!(ws.run(&[stage]).status.code(), Some(0));
    }
    let second: Vec<String> = outputs.iter().map(|f| read(&ws.out(f))).collect();
    assert_eq!(first, second);

    let coreset: Value = serde_json::from_str(&first[2]).unwrap();
    assert_eq!(coreset["strategy"], "conan");
    assert_eq!(coreset["quota"], 20);
    assert_eq!(coreset["selected"].as_array().unwrap().len(), 20);
}

#[test]
fn stream_is_offline_and_reproducible() {
    let ws = Workspace::new(&mock_config());
    let o = ws.run(&["stream"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = read(&ws.out("metrics.csv"));
    let manifest = read(&ws.out("run_manifest.json"));
    assert!(metrics.starts_with("step,accuracy\n"));
    // 2 concepts x 10 selected, evaluated every 4
    assert_eq!(metrics.lines().count(), 1 + 5);
    let m: Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["command"], "stream");
    assert_eq!(m["config"]["learner"]["seed"], 3);

    assert_eq!(ws.run(&["stream"]).status.code(), Some(0));
    assert_eq!(read(&ws.out("metrics.csv")), metrics);
    assert_eq!(read(&ws.out("run_manifest.json")), manifest);
}

#[test]
fn select_after_stream_reproduces_the_streamed_coreset() {
    let ws = Workspace::new(&mock_config());
    assert_eq!(ws.run(&["stream"]).status.code(), Some(0));
    let streamed = read(&ws.out("coreset.json"));
    assert_eq!(ws.run(&["select"]).status.code(), Some(0));
    assert_eq!(read(&ws.out("coreset.json")), streamed);
}

#[test]
fn overrides_apply() {
    let ws = Workspace::new(&mock_config());
    let alt = ws.dir.path().join("alt");
    let alt_str = alt.to_str().unwrap();
    for stage in ["prompts", "generate"] {
        assert_eq!(ws.run(&[stage, "--out", alt_str]).status.code(), Some(0));
    }
    let o = ws.run(&["select", "--out", alt_str, "--strategy", "k_highest_rmd"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let coreset: Value = serde_json::from_str(&read(&alt.join("coreset.json"))).unwrap();
    assert_eq!(coreset["strategy"], "k_highest_rmd");
    assert!(coreset["selected"][0]["p"].is_null());
    assert!(!ws.out("coreset.json").exists());

    assert_eq!(ws.run(&["prompts", "--seed", "99"]).status.code(), Some(0));
    let reseeded = read(&ws.out("prompts.json"));
    assert_eq!(ws.run(&["prompts"]).status.code(), Some(0));
    assert_ne!(reseeded, read(&ws.out("prompts.json")));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gencl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gencl(&["select"]).status.code(), Some(1));
    assert_eq!(gencl(&["--help"]).status.code(), Some(0));

    let ws = Workspace::new(&mock_config());
    assert_eq!(
        ws.run(&["select", "--strategy", "best"]).status.code(),
        Some(1)
    );

    let mut bad = mock_config();
    bad["selection"]["tau"] = json!(-1.0);
    let ws = Workspace::new(&bad);
    let o = ws.run(&["select"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/selection/tau"), "{}", stderr(&o));

    let o = gencl(&["prompts", "--config", "/definitely/missing.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn imbalanced_features_fail_the_pipeline() {
    let ws = Workspace::new(&mock_config());
    for stage in ["prompts", "generate"] {
        assert_eq!(ws.run(&[stage]).status.code(), Some(0));
    }
    let features = read(&ws.out("features.jsonl"));
    let trimmed: Vec<&str> = features
        .lines()
        .filter({
            let mut dropped = false;
            move |l| {
                let drop = !dropped && l.contains("\"generator\":\"b\"");
                dropped |= drop;
                !drop
            }
        })
        .collect();
    fs::write(ws.out("features.jsonl"), trimmed.join("\n") + "\n").unwrap();
    let o = ws.run(&["select"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pool imbalance"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_fail_the_pipeline() {
    let ws = Workspace::new(&mock_config());
    assert_eq!(ws.run(&["generate"]).status.code(), Some(2));
    assert_eq!(ws.run(&["select"]).status.code(), Some(2));
}

#[test]
fn eval_reports_requested_metrics() {
    let mut config = mock_config();
    config["evaluation"] = json!({
        "coverage_k": 3,
        "predictions": "preds.jsonl",
        "captions": "captions.json"
    });
    let ws = Workspace::new(&config);
    fs::write(
        ws.dir.path().join("preds.jsonl"),
        "{\"prediction\":\"cat\",\"label\":\"cat\"}\n{\"prediction\":\"kite\",\"label\":\"kite\"}\n",
    )
    .unwrap();
    fs::write(
        ws.dir.path().join("captions.json"),
        r#"[{"candidate": "a red kite over the beach", "references": ["a red kite over the beach"]}]"#,
    )
    .unwrap();

    let o = ws.run(&["eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&read(&ws.out("eval_report.json"))).unwrap();
    assert!(report["a_auc"].is_null());
    assert!(report["coverage"].is_null());
    assert_eq!(report["macro_f1"], 1.0);
    assert!((report["cider"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    assert_eq!(ws.run(&["stream"]).status.code(), Some(0));
    assert_eq!(ws.run(&["eval"]).status.code(), Some(0));
    let report: Value = serde_json::from_str(&read(&ws.out("eval_report.json"))).unwrap();
    let auc = report["a_auc"].as_f64().unwrap();
    let cov = report["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!((0.0..=1.0).contains(&cov));
}
