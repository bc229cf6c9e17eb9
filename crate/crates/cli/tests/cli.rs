use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condquant"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FIT: &str = r#"{
  "data": "sim/train.csv",
  "functional": {"x2": "sim/train_x2.csv"},
  "terms": [
    {"kind": "intercept", "y_basis": {"dim": 20}},
    {"kind": "varying", "column": "x1", "y_basis": {"dim": 5}},
    {"kind": "functional", "column": "x2", "t_basis": {"dim": 5}, "y_basis": {"dim": 5}}
  ],
  "presmooth": {},
  "output_dir": "fit"
}"#;

fn simulate(dir: &Path) {
    write(
        dir,
        "sim.json",
        r#"{"n": 80, "n_test": 15, "seed": 11, "output_dir": "sim"}"#,
    );
    let o = run(&["simulate", "--config", "sim.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_writes_train_and_test_files() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path());
    let train = std::fs::read_to_string(tmp.path().join("sim/train.csv")).unwrap();
    assert_eq!(train.lines().next(), Some("subject_id,y,x1"));
    assert_eq!(train.lines().count(), 81);
    let long = std::fs::read_to_string(tmp.path().join("sim/test_x2.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 15 * 30);
    assert!(tmp.path().join("sim/test_truth.csv").exists());
}

#[test]
fn predict_on_training_inputs_reproduces_fitted_values() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    write(dir, "fit.json", FIT);
    let o = run(&["fit", "--config", "fit.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    write(
        dir,
        "predict.json",
        r#"{"model": "fit/model.json", "data": "sim/train.csv",
            "functional": {"x2": "sim/train_x2.csv"}, "output_dir": "pred"}"#,
    );
    let o = run(&["predict", "--config", "predict.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("pred/cdf.csv"), read("fit/fitted_cdf.csv"));
    assert_eq!(read("pred/quantiles.csv"), read("fit/fitted_quantiles.csv"));
    let coef = String::from_utf8(read("fit/coefficients.csv")).unwrap();
    assert!(coef.starts_with("term,component,t,y,value\n"));
    assert!(coef.lines().any(|l| l.starts_with("functional(x2),")));
}

#[test]
fn predict_writes_quantiles_for_new_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    write(dir, "fit.json", FIT);
    assert!(run(&["fit", "--config", "fit.json"], dir).status.success());
    write(
        dir,
        "predict.json",
        r#"{"model": "fit/model.json", "data": "sim/test.csv",
            "functional": {"x2": "sim/test_x2.csv"}, "output_dir": "pred"}"#,
    );
    let o = run(
        &[
            "predict",
            "--config",
            "predict.json",
            "--tau",
            "0.25,0.5,0.75",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let q = std::fs::read_to_string(dir.join("pred/quantiles.csv")).unwrap();
    assert_eq!(q.lines().count(), 1 + 15 * 3);
    let mut rdr = csv::Reader::from_path(dir.join("pred/quantiles.csv")).unwrap();
    let rows: Vec<(String, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[2].parse().unwrap())
        })
        .collect();
    for w in rows.chunks(3) {
        assert!(w[0].1 <= w[1].1 && w[1].1 <= w[2].1, "{w:?}");
    }
}

#[test]
fn missing_response_column_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    write(
        dir,
        "fit.json",
        &FIT.replace(
            "\"presmooth\"",
            "\"response_column\": \"outcome\", \"presmooth\"",
        ),
    );
    let o = run(&["fit", "--config", "fit.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`outcome`"), "{}", stderr(&o));
}

#[test]
fn ragged_csv_reports_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    write(dir, "ragged.csv", "subject_id,y,x1\na,1,2\nb,3\n");
    write(dir, "fit.json", &FIT.replace("sim/train.csv", "ragged.csv"));
    let o = run(&["fit", "--config", "fit.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ragged.csv: line 3:"), "{}", stderr(&o));
}

#[test]
fn unknown_term_column_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    write(
        dir,
        "fit.json",
        &FIT.replace("\"column\": \"x1\"", "\"column\": \"age\""),
    );
    let o = run(&["fit", "--config", "fit.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`age`"), "{}", stderr(&o));
}

#[test]
fn irregular_times_need_presmoothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "sim.json",
        r#"{"n": 40, "design": "sparse", "output_dir": "sim"}"#,
    );
    assert!(run(&["simulate", "--config", "sim.json"], dir)
        .status
        .success());
    write(dir, "fit.json", &FIT.replace("\"presmooth\": {},", ""));
    let o = run(&["fit", "--config", "fit.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("presmoothing"), "{}", stderr(&o));
}

const EXPERIMENT: &str = r#"{
  "replications": 2,
  "n_test": 20,
  "threads": 1,
  "timing": false,
  "output": "out/summary.csv"
}"#;

#[test]
fn experiment_emits_one_row_per_cell_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "exp.json", EXPERIMENT);
    let o = run(&["experiment", "--config", "exp.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read_to_string(dir.join("out/summary.csv")).unwrap();
    let mut lines = first.lines();
    assert_eq!(
        lines.next(),
        Some("distribution,sigma,n,method,tau,mae,se,seconds,reps,nonconverged,failures")
    );
    assert_eq!(lines.count(), 2 * 3 * 2 * 4);
    let o = run(&["experiment", "--config", "exp.json"], dir);
    assert!(o.status.success());
    let second = std::fs::read_to_string(dir.join("out/summary.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn seed_override_changes_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "exp.json",
        r#"{"replications": 1, "n_test": 10, "threads": 1, "timing": false,
            "distributions": ["normal"], "sigmas": [0.5], "methods": ["joint"],
            "output": "a.csv"}"#,
    );
    assert!(run(&["experiment", "--config", "exp.json"], dir)
        .status
        .success());
    let a = std::fs::read_to_string(dir.join("a.csv")).unwrap();
    assert!(run(
        &[
            "experiment",
            "--config",
            "exp.json",
            "--seed",
            "99",
            "--tau",
            "0.5"
        ],
        dir
    )
    .status
    .success());
    let b = std::fs::read_to_string(dir.join("a.csv")).unwrap();
    assert_eq!(b.lines().count(), 2);
    assert_ne!(a, b);
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "exp.json", r#"{"replications": 0}"#);
    let o = run(&["experiment", "--config", "exp.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    write(
        tmp.path(),
        "fit.json",
        r#"{"data": "x.csv", "terms": [], "bogus": 1}"#,
    );
    let o = run(&["fit", "--config", "fit.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}
