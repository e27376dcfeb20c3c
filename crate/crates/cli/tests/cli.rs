//! End-to-end tests against the built `cge` binary: exit codes, error
//! records, artifact determinism, and the full ordered-probit workflow.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cge_core::sim::{gen_ordered_two_way, gen_two_way_logistic, Scenario};
use cge_core::CsvSchema;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cge"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "cge-cli-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_toy_gaussian(dir: &Path) -> PathBuf {
    let path = dir.join("toy.csv");
    std::fs::write(
        &path,
        "y,x1,user,item\n2.5,0.2,u1,m1\n1.0,-0.4,u1,m2\n3.2,0.9,u2,m1\n2.2,0.1,u2,m2\n\
         2.8,0.5,u3,m1\n1.4,-0.2,u3,m2\n3.6,1.1,u4,m1\n2.0,0.0,u4,m2\n",
    )
    .unwrap();
    path
}

const TOY_SCHEMA: &str = r#"{"response":"y","covariates":["x1"],"ways":["user","item"]}"#;

fn stderr_json(output: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&output.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr not a JSON record: {text}"))
}

#[test]
fn fit_toy_gaussian_converges_with_monotone_trace() {
    let dir = tempdir("fit");
    let input = write_toy_gaussian(&dir);
    let out = dir.join("model.json");
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args(["--schema", TOY_SCHEMA, "--family", "gaussian", "--groups", "2,2", "--seed", "1"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(artifact["converged"], serde_json::Value::Bool(true));
    let trace: Vec<f64> = artifact["objective_trace"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for w in trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-10, "trace decreased: {w:?}");
    }
    assert_eq!(artifact["schema_version"], serde_json::json!(1));
}

#[test]
fn identical_config_and_seed_produce_byte_identical_artifacts() {
    let dir = tempdir("determinism");
    // A larger dataset exercises the whole pipeline, not just a toy path.
    let (ds, _) = gen_two_way_logistic(1500, Scenario::S2, 11);
    let schema = CsvSchema {
        response: "y".into(),
        covariates: (1..=5).map(|j| format!("x{j}")).collect(),
        ways: vec!["a".into(), "b".into()],
    };
    let input = dir.join("data.csv");
    ds.write_csv(&input, &schema).unwrap();
    let schema_json = serde_json::to_string(&schema).unwrap();
    let run = |out: &Path| {
        let output = bin()
            .args(["fit", "--input"])
            .arg(&input)
            .args([
                "--schema",
                &schema_json,
                "--family",
                "logistic",
                "--seed",
                "42",
                "--starts",
                "2",
                "--init",
                "random",
            ])
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    };
    let out1 = dir.join("m1.json");
    let out2 = dir.join("m2.json");
    run(&out1);
    run(&out2);
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "model artifacts differ between identical runs");
}

#[test]
fn rank_deficient_design_names_the_column() {
    let dir = tempdir("rank");
    let input = dir.join("collinear.csv");
    let mut body = String::from("y,x1,x2,x3,u,m\n");
    for i in 0..12 {
        let a = 0.3 * i as f64 - 1.0;
        let b = (i as f64 * 0.7).sin();
        body.push_str(&format!(
            "{},{a},{b},{},u{},m{}\n",
            i as f64 * 0.5,
            a + b,
            i % 3,
            i % 2
        ));
    }
    std::fs::write(&input, body).unwrap();
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args([
            "--schema",
            r#"{"response":"y","covariates":["x1","x2","x3"],"ways":["u","m"]}"#,
            "--family",
            "gaussian",
        ])
        .arg("--out")
        .arg(dir.join("model.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let record = stderr_json(&output);
    assert_eq!(record["error"], serde_json::json!("rank_deficient"));
    let msg = record["message"].as_str().unwrap();
    assert!(
        ["x1", "x2", "x3"].iter().any(|c| msg.contains(c)),
        "message does not name a covariate column: {msg}"
    );
}

#[test]
fn missing_column_is_a_load_error_with_exit_1() {
    let dir = tempdir("missing");
    let input = write_toy_gaussian(&dir);
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args([
            "--schema",
            r#"{"response":"rating","covariates":["x1"],"ways":["user","item"]}"#,
            "--family",
            "gaussian",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let record = stderr_json(&output);
    assert_eq!(record["error"], serde_json::json!("load"));
    assert!(record["message"].as_str().unwrap().contains("rating"));
}

#[test]
fn max_iter_cap_exits_with_code_2() {
    let dir = tempdir("cap");
    let (ds, _) = gen_two_way_logistic(900, Scenario::S1, 5);
    let schema = CsvSchema {
        response: "y".into(),
        covariates: (1..=5).map(|j| format!("x{j}")).collect(),
        ways: vec!["a".into(), "b".into()],
    };
    let input = dir.join("data.csv");
    ds.write_csv(&input, &schema).unwrap();
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args([
            "--schema",
            &serde_json::to_string(&schema).unwrap(),
            "--family",
            "logistic",
            "--max-iter",
            "1",
        ])
        .arg("--out")
        .arg(dir.join("model.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn ordered_probit_workflow_end_to_end() {
    let dir = tempdir("ordered");
    let (ds, _) = gen_ordered_two_way(2500, 7);
    let schema = CsvSchema {
        response: "rating".into(),
        covariates: (1..=5).map(|j| format!("x{j}")).collect(),
        ways: vec!["user".into(), "movie".into()],
    };
    let input = dir.join("ratings.csv");
    ds.write_csv(&input, &schema).unwrap();
    let schema_json = serde_json::to_string(&schema).unwrap();
    let model_path = dir.join("model.json");
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args(["--schema", &schema_json, "--family", "ordered-probit", "--seed", "3"])
        .arg("--out")
        .arg(&model_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    // Thresholds were fitted by the null model and ride in the family.
    let thresholds = artifact["family"]["thresholds"].as_array().unwrap();
    assert_eq!(thresholds.len(), 4);
    assert!(artifact["beta_null"].is_array());

    // Smoothing: every pseudo-posterior row must be stochastic.
    let smoothed_path = dir.join("smoothed.json");
    let output = bin()
        .args(["smooth", "--model"])
        .arg(&model_path)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&smoothed_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let smoothed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&smoothed_path).unwrap()).unwrap();
    for way in smoothed["pi"].as_array().unwrap() {
        for row in way.as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
    }
    assert!(smoothed["beta_smoothed"].as_array().unwrap().len() == 5);

    // Prediction on the training rows emits metrics (observed present).
    let preds_path = dir.join("preds.csv");
    let output = bin()
        .args(["predict", "--model"])
        .arg(&model_path)
        .arg("--rows")
        .arg(&input)
        .arg("--out")
        .arg(&preds_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let metrics_line = stdout.lines().find(|l| l.contains("\"mae\"")).expect("metrics line");
    let metrics: serde_json::Value = serde_json::from_str(metrics_line).unwrap();
    assert!(metrics["mae"].as_f64().unwrap() > 0.0);
    assert!(metrics["ac1"].as_f64().unwrap() >= metrics["ac0"].as_f64().unwrap());
    let first_pred = std::fs::read_to_string(&preds_path).unwrap();
    let line2 = first_pred.lines().nth(1).unwrap();
    let category: u32 = line2.split(',').nth(2).unwrap().parse().unwrap();
    assert!((1..=5).contains(&category));

    // Prediction with smoothed effects differs from the point-effect run
    // only through the effects; metrics stay in the same ballpark.
    let output = bin()
        .args(["predict", "--model"])
        .arg(&model_path)
        .arg("--rows")
        .arg(&input)
        .arg("--smoothed")
        .arg(&smoothed_path)
        .arg("--out")
        .arg(dir.join("preds_smoothed.csv"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout.lines().find(|l| l.contains("\"mae\"")).expect("metrics line");
    let smoothed_metrics: serde_json::Value = serde_json::from_str(line).unwrap();
    let (a, b) = (
        metrics["mae"].as_f64().unwrap(),
        smoothed_metrics["mae"].as_f64().unwrap(),
    );
    assert!((a - b).abs() < 0.25, "point {a} vs smoothed {b}");
}

#[test]
fn single_way_model_fits_through_the_cli() {
    let dir = tempdir("oneway");
    let input = dir.join("one.csv");
    let mut body = String::from("y,group\n");
    for i in 0..30 {
        body.push_str(&format!("{},g{}\n", (i % 7) as f64 * 0.5 + (i % 3) as f64, i % 5));
    }
    std::fs::write(&input, body).unwrap();
    let out = dir.join("model.json");
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args([
            "--schema",
            r#"{"response":"y","covariates":[],"ways":["group"]}"#,
            "--family",
            "gaussian",
            "--groups",
            "2",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(artifact["level_counts"], serde_json::json!([5]));
    assert_eq!(artifact["beta"], serde_json::json!([]));
}

#[test]
fn predict_unknown_level_errors_without_flag_and_flags_with_it() {
    let dir = tempdir("newlevel");
    let input = write_toy_gaussian(&dir);
    let model_path = dir.join("model.json");
    let status = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args(["--schema", TOY_SCHEMA, "--family", "gaussian", "--groups", "2,2"])
        .arg("--out")
        .arg(&model_path)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = dir.join("rows.csv");
    std::fs::write(&rows, "x1,user,item\n0.4,u999,m1\n").unwrap();
    let output = bin()
        .args(["predict", "--model"])
        .arg(&model_path)
        .arg("--rows")
        .arg(&rows)
        .arg("--out")
        .arg(dir.join("p.csv"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_json(&output)["message"].as_str().unwrap().contains("u999"));

    let output = bin()
        .args(["predict", "--allow-new-levels", "--model"])
        .arg(&model_path)
        .arg("--rows")
        .arg(&rows)
        .arg("--out")
        .arg(dir.join("p.csv"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let body = std::fs::read_to_string(dir.join("p.csv")).unwrap();
    assert!(body.lines().nth(1).unwrap().ends_with("true"), "{body}");
}

#[test]
fn simulate_writes_tables_and_rejects_zero_reps() {
    let dir = tempdir("simulate");
    let out = dir.join("study");
    let output = bin()
        .args([
            "simulate",
            "--design",
            "two-way-logistic",
            "--n",
            "400,800",
            "--reps",
            "5",
            "--seed",
            "9",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let progress = String::from_utf8_lossy(&output.stderr);
    assert!(progress.lines().filter(|l| l.contains("replication")).count() >= 10);
    let rows: Vec<String> = std::fs::read_to_string(out.with_extension("csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(rows.len(), 3); // header + one row per N
    assert!(rows[1].starts_with("400,"));
    assert!(rows[2].starts_with("800,"));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(results[0]["estimates"].as_array().unwrap().len(), 5);

    let output = bin()
        .args([
            "simulate",
            "--design",
            "two-way-logistic",
            "--n",
            "400",
            "--reps",
            "0",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(stderr_json(&output)["error"], serde_json::json!("config"));
}

#[test]
fn three_way_poisson_csv_fits_and_smooths() {
    use cge_core::sim::gen_three_way_poisson;
    let dir = tempdir("threeway");
    let (ds, _) = gen_three_way_poisson(1200, Scenario::S1, 8);
    let schema = CsvSchema {
        response: "count".into(),
        covariates: (1..=5).map(|j| format!("x{j}")).collect(),
        ways: vec!["a".into(), "b".into(), "c".into()],
    };
    let input = dir.join("counts.csv");
    ds.write_csv(&input, &schema).unwrap();
    let model_path = dir.join("model.json");
    let output = bin()
        .args(["fit", "--input"])
        .arg(&input)
        .args([
            "--schema",
            &serde_json::to_string(&schema).unwrap(),
            "--family",
            "poisson",
            "--groups",
            "4,4,4",
        ])
        .arg("--out")
        .arg(&model_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    assert_eq!(artifact["group_counts"], serde_json::json!([4, 4, 4]));
    assert_eq!(artifact["alpha"].as_array().unwrap().len(), 3);
    let status = bin()
        .args(["smooth", "--model"])
        .arg(&model_path)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(dir.join("smoothed.json"))
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn print_config_echoes_resolved_values() {
    let dir = tempdir("echo");
    let input = write_toy_gaussian(&dir);
    // Config file sets lambda; the flag overrides the seed.
    let cfg_path = dir.join("run.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "input": input,
            "schema": serde_json::from_str::<serde_json::Value>(TOY_SCHEMA).unwrap(),
            "family": "gaussian",
            "lambda": 250.0,
            "seed": 1,
        })
        .to_string(),
    )
    .unwrap();
    let output = bin()
        .args(["fit", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "7", "--print-config"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let echoed: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&output.stdout)).unwrap();
    assert_eq!(echoed["fit"]["lambda"], serde_json::json!(250.0));
    assert_eq!(echoed["fit"]["seed"], serde_json::json!(7));
}
