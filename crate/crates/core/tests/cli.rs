use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn countfit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countfit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("COUNTFIT_SEED")
        .output()
        .unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", name];
    args.extend_from_slice(extra);
    let o = countfit(&args, dir);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_requested_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let flags = ["--case", "basic", "--n", "50", "--beta0", "-2", "--sigma2", "5", "--seed", "7"];
    simulate(dir.path(), "a.csv", &flags);
    simulate(dir.path(), "b.csv", &flags);
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let body = |s: &str| s.lines().filter(|l| !l.starts_with('#')).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(&a), body(&b));
    assert_eq!(body(&a).len(), 51);
    assert!(a.starts_with("# countfit simulate"));
    assert!(a.lines().next().unwrap().contains("seed=7"));
}

#[test]
fn simulate_records_seed_source() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_countfit"))
        .args(["simulate", "--case", "group", "--n", "20"])
        .env("COUNTFIT_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().ends_with("[seed=11 from COUNTFIT_SEED]"));
    assert!(text.lines().nth(1).unwrap().ends_with(",group,effect"));

    let o = countfit(&["simulate", "--case", "basic", "--n", "20"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().ends_with("[seed=0 from default]"));
}

#[test]
fn invalid_case_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = countfit(&["simulate", "--case", "weird"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "input");
}

#[test]
fn fit_proposed_reports_every_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", &["--case", "basic", "--n", "80", "--seed", "3"]);
    let o = countfit(
        &["fit", "--input", "d.csv", "--covariates", "x1,x2", "--method", "proposed"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let j: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(j["coefficients"].as_array().unwrap().len(), 3);
    assert_eq!(j["fit"]["beta"].as_array().unwrap().len(), 3);
    assert!(j["invocation"].as_str().unwrap().starts_with("countfit fit"));
    assert!(j["zero_ratio"].as_f64().is_some());
    assert_eq!(j["config"]["method"], "proposed");
    assert!(j["sigma"].as_f64().unwrap() > 0.0);
    // Stars belong to the table only.
    assert!(!String::from_utf8_lossy(&o.stdout).contains('*'));
}

#[test]
fn fit_table_shows_significance_stars() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", &["--case", "basic", "--n", "200", "--beta0", "1", "--seed", "3"]);
    let o = countfit(
        &["fit", "--input", "d.csv", "--covariates", "x1,x2", "--format", "table", "--out", "fit.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("***"));
    let j: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(j["coefficient_names"][1], "x1");
}

#[test]
fn posterior_without_shift_on_zeros_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", &["--case", "basic", "--n", "50", "--beta0", "-2", "--sigma2", "5"]);
    let o = countfit(
        &["fit", "--input", "d.csv", "--covariates", "x1,x2", "--method", "posterior", "--c", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("logarithm of zero"));
}

#[test]
fn glm_methods_and_flag_validation() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", &["--case", "group", "--n", "100", "--seed", "5", "--sigma2", "3"]);
    for m in ["poisson", "odpoisson", "negbin"] {
        let o = countfit(&["fit", "--input", "d.csv", "--covariates", "x1,x2", "--method", m], dir.path());
        assert_eq!(o.status.code(), Some(0), "{m}: {}", String::from_utf8_lossy(&o.stderr));
        let j: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(j["glm"]["converged"], true);
    }
    let o = countfit(
        &["fit", "--input", "d.csv", "--covariates", "x1,x2", "--method", "poisson", "--group", "group"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = countfit(&["fit", "--input", "d.csv", "--method", "poisson", "--c", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = countfit(&["fit", "--input", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn all_zero_counts_are_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("z.csv"), "y,x\n0,1\n0,2\n0,3\n0,4\n").unwrap();
    let o = countfit(&["fit", "--input", "z.csv", "--covariates", "x", "--method", "poisson"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "numerical");
}

#[test]
fn mixed_fit_reports_one_effect_vector_per_term() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "s.csv", &["--case", "spatial", "--n", "40", "--seed", "2"]);
    let o = countfit(
        &["fit", "--input", "s.csv", "--covariates", "x1,x2", "--spatial", "sx,sy", "--reml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let j: Value = serde_json::from_slice(&o.stdout).unwrap();
    let terms = j["random_effects"].as_array().unwrap();
    assert_eq!(terms.len(), 1);
    assert_eq!(terms[0]["kind"], "spatial");
    assert_eq!(terms[0]["effect"].as_array().unwrap().len(), 40);
    assert_eq!(j["mixed"]["reml"], true);
}

#[test]
fn bench_cardinality_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "bench", "--case", "basic", "--beta0", "-2,1", "--sigma2", "5", "--n", "50", "--iters", "20",
            "--estimators", "proposed,taylor", "--seed", "9", "--out", out,
        ]
    };
    assert_eq!(countfit(&args("r1"), dir.path()).status.code(), Some(0));
    assert_eq!(countfit(&args("r2"), dir.path()).status.code(), Some(0));
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("bench.csv")).unwrap();
    let (a, b) = (read("r1"), read("r2"));
    let body = |s: &str| s.lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(&a), body(&b));
    let rows: Vec<&str> = a.lines().skip(2).collect();
    let metric_rows = rows
        .iter()
        .filter(|r| r.contains(",rmse,") || r.contains(",bias,") || r.contains(",mean_se,"))
        .count();
    assert_eq!(metric_rows, 2 * 2 * 3 * 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",failure_count,")).count(), 4);
    assert!(a.starts_with("# countfit bench") && a.lines().next().unwrap().contains("seed=9 from flag"));
    let j: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r1/bench.json")).unwrap()).unwrap();
    assert_eq!(j["provenance"]["master_seed"], 9);
}

#[test]
fn bench_rejects_single_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let o = countfit(&["bench", "--iters", "1", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("iters >= 2"));
}

#[test]
fn basis_writes_centred_columns() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "s.csv", &["--case", "spatial", "--n", "25", "--seed", "4"]);
    let o = countfit(&["basis", "--input", "s.csv", "--spatial", "sx,sy", "--out", "b.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 25);
    for k in 0..rows[0].len() {
        let s: f64 = rows.iter().map(|r| r[k]).sum();
        assert!(s.abs() < 1e-9);
    }
    assert!(text.lines().nth(1).unwrap().starts_with("# eigenvalues: "));
}
