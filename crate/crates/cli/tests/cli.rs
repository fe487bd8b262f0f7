use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asyncbezier::metrics::RunRecord;

const SMALL: &str = r#"
seeds = [0]
n_clients = 4
total_updates = 20
eval_every = 5

[data]
n_samples = 400
n_features = 4
n_classes = 3
class_sep = 2.0
dirichlet_alpha = 1.0

[model]
kind = "logistic"

[local]
k_sgd = 1
k_curve = 1
eta_l = 0.05

[[strategies]]
kind = "fedasync"
eta_g = 1.0
"#;

const TWO: &str = r#"
[[strategies]]
kind = "asyncbezier"
eta_g = 1.0
vartheta = 1.0
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_asyncbezier"));
    c.env_remove(asyncbezier_cli::OUT_ENV).env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn single_cell_writes_one_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out.join("runs")), vec!["fedasync_seed0.json"]);
    assert_eq!(files(&out.join("rounds")), vec!["fedasync_seed0.csv"]);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    let rounds = std::fs::read_to_string(out.join("rounds/fedasync_seed0.csv")).unwrap();
    assert_eq!(rounds.lines().next().unwrap(), "version,loss,acc,staleness,s_factor");
}

#[test]
fn sweep_writes_every_cell_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}{TWO}"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "0,1,2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(files(&a.join("runs")).len(), 6);
    let sa = std::fs::read(a.join("summary.csv")).unwrap();
    let sb = std::fs::read(b.join("summary.csv")).unwrap();
    assert_eq!(sa, sb);
    let text = String::from_utf8(sa).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("fedasync,3,0,"));
    assert!(rows[2].starts_with("asyncbezier,3,0,"));
}

#[test]
fn serial_and_parallel_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}{TWO}"));
    let mut summaries = Vec::new();
    for w in ["1", "4"] {
        let out = tmp.path().join(format!("w{w}"));
        let o = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seeds",
            "3,4",
            "--workers",
            w,
        ]);
        assert!(o.status.success());
        summaries.push(std::fs::read(out.join("summary.csv")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn outputs_are_write_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(run(&args).status.success());
    let before = std::fs::read(out.join("runs/fedasync_seed0.json")).unwrap();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read(out.join("runs/fedasync_seed0.json")).unwrap(), before);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("n_clients", "n_client"));
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_client"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn env_sets_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("from-env");
    let o =
        bin().args(["run", "--config", cfg.to_str().unwrap()]).env(asyncbezier_cli::OUT_ENV, &out).output().unwrap();
    assert!(o.status.success());
    assert!(out.join("summary.csv").exists());
}

#[test]
fn events_log_one_line_per_arrival() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--events"]);
    assert!(o.status.success());
    let log = std::fs::read_to_string(out.join("events/fedasync_seed0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("staleness").is_some());
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}{TWO}"));
    let out = tmp.path().join("out");
    assert!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let rec = RunRecord::from_json(&std::fs::read_to_string(out.join("runs/asyncbezier_seed0.json")).unwrap()).unwrap();
    let sim: asyncbezier::sim::SimConfig = serde_json::from_value(rec.config.clone()).unwrap();
    let again = asyncbezier::sim::run(&sim).unwrap();
    assert_eq!(again.to_json().unwrap(), rec.to_json().unwrap());
}

#[test]
fn divergence_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL
        .replace("total_updates = 20", "total_updates = 100")
        .replace("kind = \"logistic\"", "kind = \"logistic\"\nl2 = 1.0")
        .replace("eta_l = 0.05", "eta_l = 10000.0")
        .replace("eta_g = 1.0", "eta_g = 1.0e6\nclient_weighting = \"uniform\"");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with("partial"));
}

#[test]
fn epoch_study_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("epochs = [1]\n{SMALL}"));
    let out = tmp.path().join("out");
    let o = run(&["epoch-study", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = std::fs::read_to_string(out.join("epoch_grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "k,fedasync_mean,fedasync_std");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn epoch_study_budgets_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("epochs = [1, 5]\n{SMALL}{TWO}"));
    let mut grids = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        assert!(run(&["epoch-study", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status
            .success());
        grids.push(std::fs::read(out.join("epoch_grid.csv")).unwrap());
    }
    assert_eq!(grids[0], grids[1]);
    let echo = |f: &str| {
        let rec =
            RunRecord::from_json(&std::fs::read_to_string(tmp.path().join("a/k5/runs").join(f)).unwrap()).unwrap();
        (rec.config["curve"]["k_sgd"].as_u64().unwrap(), rec.config["curve"]["k_curve"].as_u64().unwrap())
    };
    assert_eq!(echo("asyncbezier_seed0.json"), (5, 2));
    assert_eq!(echo("fedasync_seed0.json"), (5, 0));
}

fn write_data(path: &Path) {
    let mut s = String::from("label,f0,f1\n");
    for i in 0..40 {
        let x = (i as f64) / 10.0 - 2.0;
        s += &format!("{},{x},{}\n", usize::from(x > 0.0), 0.5 * x);
    }
    std::fs::write(path, s).unwrap();
}

fn profile(curve: &str, points: &str) -> (Output, Vec<(f64, f64, f64)>) {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("curve.csv");
    let d = tmp.path().join("data.csv");
    std::fs::write(&c, curve).unwrap();
    write_data(&d);
    let o = run(&[
        "profile",
        "--curve",
        c.to_str().unwrap(),
        "--data",
        d.to_str().unwrap(),
        "--features",
        "2",
        "--classes",
        "2",
        "--points",
        points,
    ]);
    let rows = String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect();
    (o, rows)
}

#[test]
fn point_curve_profile_is_flat() {
    let row = "0.1,-0.2,0.3,0.05,0.0,0.4";
    let (o, rows) = profile(&format!("{row}\n{row}\n{row}\n"), "5");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r.1, rows[0].1);
        assert_eq!(r.2, rows[0].1);
    }
}

#[test]
fn two_point_profile_is_endpoints() {
    let (o, rows) = profile("0,0,0,0,0,0\n1,1,1,1,1,1\n0.5,-0.5,0.5,-0.5,0.5,-0.5\n", "2");
    assert!(o.status.success());
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0.0, 1.0]);
    for r in rows {
        assert_eq!(r.1, r.2);
    }
}

#[test]
fn malformed_curve_reports_position() {
    let (o, _) = profile("0,0,0,0,0,0\n1,x,1,1,1,1\n0,0,0,0,0,0\n", "3");
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}
