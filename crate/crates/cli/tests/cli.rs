use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn orchestra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orchestra"))
        .args(args)
        .env_remove("ORCHESTRA_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = orchestra(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workload() -> serde_json::Value {
    serde_json::json!({
        "n_machines": 3,
        "machine_capacity_distribution": {
            "cpu": { "kind": "constant", "value": 1.0 },
            "mem": { "kind": "constant", "value": 1.0 },
            "io": { "kind": "constant", "value": 1.0 }
        },
        "task_arrival_rate": 1.0,
        "n_tasks": 15,
        "demand_distribution": {
            "cpu": { "kind": "uniform", "low": 0.1, "high": 0.5 },
            "mem": { "kind": "uniform", "low": 0.05, "high": 0.4 },
            "io": { "kind": "uniform", "low": 0.05, "high": 0.3 }
        },
        "duration_distribution": { "kind": "uniform", "low": 3.0, "high": 8.0 },
        "n_tenants": 3,
        "tenant_skew": 1.0
    })
}

fn write_config(dir: &Path, epochs: usize, workers: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "trace": { "workload": workload() },
        "roles": { "compute": 2, "storage": 1, "scheduler": 1 },
        "train": { "total_epochs": epochs, "batch_size": 8, "hidden": [8], "workers": workers, "episodes_per_epoch": 2 },
        "eval_episodes": 2,
        "checkpoint_every": 2,
        "out_dir": "run"
    });
    let p = dir.join(format!("run_{epochs}_{workers}.json"));
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().skip(1).filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn gen_trace_writes_two_identical_files_per_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, workload().to_string()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-trace", "--config", s(&spec), "--out", s(&a), "--seed", "9"]);
    ok(&["gen-trace", "--config", s(&spec), "--out", s(&b), "--seed", "9"]);
    for f in ["machine_events.csv", "task_events.csv"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn gen_trace_rejects_missing_or_invalid_spec() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    assert!(!orchestra(&["gen-trace", "--config", "/nonexistent/spec.json", "--out", s(&out)])
        .status
        .success());
    let bad = tmp.path().join("bad.json");
    let mut w = workload();
    w["n_tasks"] = 0.into();
    fs::write(&bad, w.to_string()).unwrap();
    assert!(!orchestra(&["gen-trace", "--config", s(&bad), "--out", s(&out)]).status.success());
}

#[test]
fn one_epoch_run_has_one_curve_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, 1);
    ok(&["train", "--config", s(&cfg)]);
    let curve = fs::read_to_string(tmp.path().join("run/curve.csv")).unwrap();
    assert_eq!(data_lines(&curve).len(), 1);
    for f in ["checkpoint.json", "resume.json", "report.csv", "run.json"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_and_worker_counts_give_identical_curves() {
    let tmp = TempDir::new().unwrap();
    let one = write_config(tmp.path(), 4, 1);
    let four = write_config(tmp.path(), 4, 4);
    let dirs = ["r1", "r2", "r3"].map(|d| tmp.path().join(d));
    ok(&["train", "--config", s(&one), "--out", s(&dirs[0])]);
    ok(&["train", "--config", s(&one), "--out", s(&dirs[1])]);
    ok(&["train", "--config", s(&four), "--out", s(&dirs[2])]);
    let curve = |d: &PathBuf| fs::read(d.join("curve.csv")).unwrap();
    assert_eq!(curve(&dirs[0]), curve(&dirs[1]));
    assert_eq!(curve(&dirs[0]), curve(&dirs[2]));
}

#[test]
fn interrupted_run_resumes_to_the_uninterrupted_result() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 5, 1);
    let (whole, parts) = (tmp.path().join("whole"), tmp.path().join("parts"));
    ok(&["train", "--config", s(&cfg), "--out", s(&whole)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&parts), "--stop-after", "3"]);
    assert!(!parts.join("report.csv").exists());
    let partial = fs::read_to_string(parts.join("curve.csv")).unwrap();
    assert_eq!(data_lines(&partial).len(), 3);
    ok(&["train", "--config", s(&cfg), "--out", s(&parts)]);
    for f in ["curve.csv", "checkpoint.json"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(parts.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resuming_with_a_different_config_fails() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 3, 1);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--stop-after", "1"]);
    assert!(!orchestra(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "4"])
        .status
        .success());
}

#[test]
fn config_errors_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, 1);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["mystery"] = 1.into();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    assert!(!orchestra(&["train", "--config", s(&bad)]).status.success());
    assert!(!orchestra(&["train", "--config", "/nonexistent.json"]).status.success());
}

#[test]
fn workers_env_must_be_a_positive_integer() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, 4);
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_orchestra"))
            .args(["train", "--config", s(&cfg)])
            .env("ORCHESTRA_WORKERS", v)
            .output()
            .unwrap()
            .status
            .success()
    };
    assert!(!run("zero"));
    assert!(!run("0"));
    assert!(run("2"));
}

#[test]
fn eval_needs_a_trained_run_and_reports_baselines() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, 1);
    assert!(!orchestra(&["eval", "--config", s(&cfg)]).status.success());
    ok(&["train", "--config", s(&cfg)]);
    ok(&["eval", "--config", s(&cfg)]);
    let text = fs::read_to_string(tmp.path().join("run/eval.csv")).unwrap();
    let names: Vec<&str> = data_lines(&text).iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["learned", "random", "greedy"]);
}

#[test]
fn ablate_emits_four_labelled_rows_and_a_reference_footer() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, 1);
    ok(&["ablate", "--config", s(&cfg), "--seeds", "0,1"]);
    let text = fs::read_to_string(tmp.path().join("run/ablation.csv")).unwrap();
    let labels: Vec<&str> = data_lines(&text).iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["BASELINE", "+HRAC", "+LGRS", "FULL"]);
    assert!(text.lines().any(|l| l.starts_with("# reference") && l.contains("76.2")));
    let seeds = fs::read_to_string(tmp.path().join("run/ablation_seeds.csv")).unwrap();
    assert_eq!(data_lines(&seeds).len(), 8);
}

#[test]
fn full_ablation_row_matches_train_then_eval() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, 1);
    ok(&["ablate", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg)]);
    let ablation = fs::read_to_string(tmp.path().join("run/ablation.csv")).unwrap();
    let full: Vec<&str> = data_lines(&ablation)[3].split(',').collect();
    let report = fs::read_to_string(tmp.path().join("run/report.csv")).unwrap();
    let trained: Vec<&str> = data_lines(&report)[0].split(',').collect();
    assert_eq!(full[1..4], trained[0..3]);
}

#[test]
fn info_loss_sweep_has_one_row_per_rate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, 1);
    let values = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7";
    ok(&["sweep", "--config", s(&cfg), "--axis", "info_loss", "--values", values]);
    let text = fs::read_to_string(tmp.path().join("run/sweep_info_loss.csv")).unwrap();
    assert!(text.starts_with("info_loss,resource_utilization_pct,avg_scheduling_latency_ms"));
    assert_eq!(data_lines(&text).len(), 8);
    let summary = fs::read_to_string(tmp.path().join("run/sweep_info_loss_summary.txt")).unwrap();
    assert!(summary.contains("spearman="));
}

#[test]
fn sweep_rejects_bad_values() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, 1);
    for (axis, values) in [("tenants", "4,2"), ("tenants", "2"), ("agents", "2,4"), ("speed", "1,2")] {
        assert!(
            !orchestra(&["sweep", "--config", s(&cfg), "--axis", axis, "--values", values])
                .status
                .success(),
            "{axis} {values}"
        );
    }
}

#[test]
fn report_fails_on_an_empty_directory() {
    let tmp = TempDir::new().unwrap();
    for f in ["csv", "svg"] {
        assert!(!orchestra(&["report", "--out", s(tmp.path()), "--format", f]).status.success());
    }
}

fn polyline_vertices(svg: &str) -> usize {
    let start = svg.find("<polyline points=\"").unwrap() + "<polyline points=\"".len();
    let end = start + svg[start..].find('"').unwrap();
    svg[start..end].split_whitespace().count()
}

#[test]
fn report_renders_one_vertex_per_curve_point_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 6, 1);
    ok(&["train", "--config", s(&cfg)]);
    let run = tmp.path().join("run");
    ok(&["report", "--out", s(&run), "--format", "svg"]);
    let svg = fs::read_to_string(run.join("curve_mean_utilization.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(polyline_vertices(&svg), 6);
    ok(&["report", "--out", s(&run), "--format", "svg"]);
    assert_eq!(fs::read_to_string(run.join("curve_mean_utilization.svg")).unwrap(), svg);

    ok(&["report", "--out", s(&run), "--format", "csv"]);
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.starts_with("source,key,metric,value\n"));
    assert_eq!(summary.lines().filter(|l| l.contains(",mean_utilization,")).count(), 6);
}
