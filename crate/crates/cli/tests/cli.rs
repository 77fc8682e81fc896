use std::path::Path;
use std::process::{Command, Output};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).env_remove("FORGE_LLM_ENDPOINT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = forge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn one_line_error(args: &[&str]) -> String {
    let out = forge(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn full_desk_workflow_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a");
    let r = run.to_str().unwrap();
    assert!(ok(&["bank", "generate", "--bank", "fm", "--seed", "7", "--out", r, "--size", "desk"]).contains("26 fm scenarios"));
    assert!(ok(&["bank", "run", "--in", r]).contains("S26"));
    assert!(ok(&["features", "--in", r]).contains("26 feature matrices"));
    assert!(ok(&["cluster", "--in", r, "--t", "0.3"]).contains("output space (ghgAbateFMs)"));
    let train = ok(&["train", "--in", r, "--target", "capFMs", "--folds", "3", "--trees", "8"]);
    assert!(train.contains("held-out R2"), "{train}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("model/metrics.json")).unwrap()).unwrap();
    assert!(metrics["test"]["rmse"].is_number() && metrics["test"]["r2"].is_number());
    assert!(Path::new(&run.join("model/ensemble.json")).exists());
    assert!(ok(&["shap", "--in", r, "--subsamples", "1", "--subsample-size", "8"]).contains("1. "));
    let ask = ok(&["ask", "What happens if CO2 price increases by 20%?", "--in", r, "--stub"]);
    assert!(ask.contains("Matches: S04, S05, S06"), "{ask}");
    assert!(ask.contains("Cluster #"), "{ask}");
    assert!(ask.contains("[stub response"), "{ask}");

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    for step in ["bank_generate", "bank_run", "features", "cluster", "train", "shap", "ask"] {
        assert!(manifest["steps"][step]["outputs"].as_object().is_some_and(|o| !o.is_empty()), "{step}");
    }

    let e = one_line_error(&["train", "--in", r, "--target", "capAgri"]);
    assert!(e.contains("capFMs"), "{e}");
}

#[test]
fn ask_without_run_directory_uses_in_memory_bank() {
    let a = ok(&["ask", "What happens if CO2 price increases by 20%?", "--stub"]);
    let b = ok(&["ask", "What happens if CO2 price increases by 20%?", "--stub"]);
    assert_eq!(a, b);
    assert!(a.contains("Parsed: CO2price x1.2"), "{a}");
    assert!(a.contains("Matches: S04, S05, S06"), "{a}");
    assert!(a.contains("Narrative (stub)"), "{a}");

    let agri = ok(&["ask", "What if investment costs decrease?", "--bank", "agri", "--stub", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&agri).unwrap();
    assert_eq!(v["query"]["parameter"], "costInvAgri");
    assert_eq!(v["matches"]["ids"], serde_json::json!(["S10", "S11", "S12", "S15"]));
}

#[test]
fn errors_are_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let m = missing.to_str().unwrap();
    let e = one_line_error(&["bank", "run", "--in", m]);
    assert!(e.starts_with("forge: error:"), "{e}");
    one_line_error(&["features", "--in", m]);
    one_line_error(&["ask", "What if rainfall doubles?", "--stub"]);
    let e = one_line_error(&["ask", "What if CO2 price rises by 20%?"]);
    assert!(e.contains("FORGE_LLM_ENDPOINT"), "{e}");
    let cfg = dir.path().join("narrator.json");
    std::fs::write(&cfg, "{\"eps\": ").unwrap();
    one_line_error(&["ask", "What if CO2 price rises by 20%?", "--config", cfg.to_str().unwrap()]);
    one_line_error(&["serve"]);
}

#[test]
fn narrator_config_file_extends_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("narrator.json");
    std::fs::write(
        &cfg,
        r#"{"patterns": [{"pattern": "emission\\s+price", "target": "CO2price"}], "eps": 0.05, "threshold": 0.3, "client": {"kind": "stub"}}"#,
    )
    .unwrap();
    let out = ok(&["ask", "What if the emission price rises by 50%?", "--config", cfg.to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["query"]["parameter"], "CO2price");
    assert_eq!(v["query"]["multiplier"], 1.5);
}
