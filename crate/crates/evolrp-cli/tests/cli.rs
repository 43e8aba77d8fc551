//! End-to-end checks of the binary's contract: artifact layout, manifest
//! contents, flag precedence, exit codes, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn evolrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evolrp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = evolrp(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json_file(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).expect("artifact exists");
    serde_json::from_str(&text).expect("artifact is valid JSON")
}

/// One small trained model shared by every test in this binary.
fn trained_model() -> &'static Path {
    static MODEL: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let out = dir.path().join("train");
        run_ok(&[
            "train",
            "--out",
            out.to_str().unwrap(),
            "--n-per-class",
            "40",
            "--stop-at-accuracy",
            "0.9",
        ]);
        let model = out.join("model.json");
        assert!(model.is_file());
        assert!(out.join("history.json").is_file());
        let manifest = json_file(&out.join("manifest.json"));
        assert_eq!(manifest["schema_version"], 1);
        assert_eq!(manifest["command"], "train");
        assert_eq!(manifest["config"]["data"]["data_seed"], 7);
        (dir, model)
    });
    path
}

fn model_arg() -> &'static str {
    trained_model().to_str().unwrap()
}

#[test]
fn evaluate_with_fixed_seeds_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "evaluate".to_string(),
            "--model".into(),
            model_arg().into(),
            "--out".into(),
            dir.path().join(out).display().to_string(),
            "--method".into(),
            "lrp0".into(),
            "--n-per-class".into(),
            "2".into(),
        ]
    };
    let first = args("a");
    let second = args("b");
    run_ok(&first.iter().map(String::as_str).collect::<Vec<_>>());
    run_ok(&second.iter().map(String::as_str).collect::<Vec<_>>());
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);

    // A different metric seed must actually change the report.
    let mut third: Vec<String> = args("c");
    third.extend(["--metric-seed".into(), "8".into()]);
    run_ok(&third.iter().map(String::as_str).collect::<Vec<_>>());
    let c = std::fs::read(dir.path().join("c/report.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn evaluate_report_carries_schema_version_and_selected_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    run_ok(&[
        "evaluate",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "ig",
        "--metrics",
        "sparseness,faithfulness",
        "--n-per-class",
        "2",
        "--ig-steps",
        "8",
    ]);
    let report = json_file(&out.join("report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["report"]["method"], "ig");
    assert!(report["report"]["sparseness"].is_object());
    assert!(report["report"]["faithfulness"].is_object());
    assert!(report["report"]["sensitivity"].is_null());
    let manifest = json_file(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["metrics"], serde_json::json!(["sparseness", "faithfulness"]));
}

#[test]
fn optimize_with_zero_iters_reports_the_starting_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    run_ok(&[
        "optimize",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--metric",
        "sparseness",
        "--rule",
        "alphabeta",
        "--iters",
        "0",
        "--n-per-class",
        "2",
    ]);
    let result = json_file(&out.join("result.json"));
    assert_eq!(result["history"].as_array().unwrap().len(), 1);
    assert_eq!(result["best"]["theta"], serde_json::json!([0.0, 0.0, 0.0, 0.0, 0.0]));
    assert_eq!(result["best"]["fitness"], result["initial"]["fitness"]);
    assert_eq!(result["rule_family"], "alpha_beta");
    assert!(result["lrp0_baseline_metric_value"].is_f64());

    // The tuned rules artifact round-trips through the library type.
    let rules: evolrp::lrp::LayerRuleConfig =
        serde_json::from_str(&std::fs::read_to_string(out.join("best_rules.json")).unwrap())
            .unwrap();
    assert_eq!(rules.rules.len(), 5);
}

#[test]
fn compare_lists_the_five_methods_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    run_ok(&[
        "compare",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--evolrp-iters",
        "0",
        "--n-per-class",
        "1",
        "--n-subsets",
        "8",
        "--n-perturbations",
        "2",
        "--lime-samples",
        "40",
    ]);
    let table = json_file(&out.join("comparison.json"));
    let methods: Vec<&str> = table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|row| row["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["LIME", "IG", "GradCAM", "LRP-0", "EVO-LRP"]);
    assert!(table["evolrp_rules"]["rules"].is_array());
}

#[test]
fn explain_writes_heatmap_and_echoes_resolved_rules() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("explain");
    let stdout = run_ok(&[
        "explain",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--rule",
        "epsilon",
        "--param",
        "0.1",
        "--image-index",
        "3",
        "--format",
        "csv",
    ]);
    assert!(out.join("heatmap.csv").is_file());
    assert!(stdout.contains("data seed 7"), "seeds are printed: {stdout}");
    let manifest = json_file(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["rules"]["rules"][0], serde_json::json!({"epsilon": 0.1}));
    assert_eq!(manifest["config"]["image_index"], 3);
}

#[test]
fn composite_needs_exactly_three_rule_files() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("rules.json");
    std::fs::write(&rules, r#"{"rules":["zero","zero","zero","zero","zero"]}"#).unwrap();
    let r = rules.to_str().unwrap();
    let out = dir.path().join("comp");
    let short = evolrp(&[
        "composite", "--model", model_arg(), "--out", out.to_str().unwrap(), "--rules", r,
        "--rules", r,
    ]);
    assert_eq!(short.status.code(), Some(2));

    run_ok(&[
        "composite",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--rules",
        r,
        "--rules",
        r,
        "--rules",
        r,
        "--format",
        "csv",
    ]);
    let text = std::fs::read_to_string(out.join("composite.csv")).unwrap();
    assert!(text.starts_with("row,col,value\n"));
    let manifest = json_file(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["rules"].as_array().unwrap().len(), 3);
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"data_seed": 99, "n_per_class": 2, "metric_seed": 123}"#).unwrap();
    let out = dir.path().join("eval");
    run_ok(&[
        "evaluate",
        "--model",
        model_arg(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "gradcam",
        "--config",
        config.to_str().unwrap(),
        "--data-seed",
        "55",
        "--metrics",
        "sparseness",
    ]);
    let manifest = json_file(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["data"]["data_seed"], 55);
    assert_eq!(manifest["config"]["data"]["n_per_class"], 2);
    assert_eq!(manifest["config"]["metric_config"]["seed"], 123);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let unknown = evolrp(&["evaluate", "--model", model_arg(), "--out", "/tmp/x", "--method", "ig", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = evolrp(&["evaluate", "--model", "/no/such/model.json", "--out", "/tmp/x", "--method", "ig"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let malformed = evolrp(&[
        "evaluate", "--model", model_arg(), "--out", "/tmp/x", "--method", "ig", "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(malformed.status.code(), Some(2));

    let no_rules = evolrp(&["evaluate", "--model", model_arg(), "--out", "/tmp/x", "--method", "evolrp"]);
    assert_eq!(no_rules.status.code(), Some(2));
}
