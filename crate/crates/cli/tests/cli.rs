use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn surelock(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surelock"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = surelock(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap()
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn summary(dir: &Path, out: &str) -> Value {
    serde_json::from_str(&read(&dir.join(out), "summary.json")).unwrap()
}

const LIVELY: [&str; 2] = ["--init-std", "0.3"];

#[test]
fn negative_threshold_reproduces_the_baseline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &[&["run", "--mode", "baseline", "--out", "base"][..], &LIVELY].concat());
    ok(d, &[&["run", "--mode", "surelock", "--eps", "-1", "--out", "off"][..], &LIVELY].concat());
    assert_eq!(read(&d.join("base"), "tokens.txt"), read(&d.join("off"), "tokens.txt"));

    let ratios = csv_column(&read(&d.join("base"), "trace.csv"), "ratio");
    assert_eq!(ratios.len(), 16);
    assert!(ratios.iter().all(|r| r.parse::<f64>().unwrap() == 1.0));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &[&["run", "--seed", "7", "--eps", "5e-3", "--out", out][..], &LIVELY].concat());
    }
    for file in ["trace.jsonl", "trace.csv", "tokens.txt"] {
        assert_eq!(read(&d.join("a"), file), read(&d.join("b"), file), "{file}");
    }
}

#[test]
fn surelock_ratio_never_rises() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["run", "--mode", "surelock", "--out", "r"]);
    let ratios: Vec<f64> = csv_column(&read(&d.join("r"), "trace.csv"), "ratio")
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]), "{ratios:?}");
    assert!(*ratios.last().unwrap() < 1.0);

    let s = summary(d, "r");
    assert_eq!(s["steps"], 16);
    assert_eq!(s["tokens"].as_array().unwrap().len(), 32);
}

#[test]
fn sweep_rows_follow_the_threshold() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &[&["sweep", "--eps-list", "5e-4,5e-3,5e-2", "--out", "sw"][..], &LIVELY].concat());
    let text = read(&d.join("sw"), "sweep.csv");
    let eps = csv_column(&text, "epsilon");
    let totals: Vec<u64> = csv_column(&text, "total_flops").iter().map(|t| t.parse().unwrap()).collect();
    assert_eq!(eps.len(), 3);
    assert!(totals.windows(2).all(|w| w[1] <= w[0]), "{totals:?}");
    assert!(totals[2] < totals[0], "{totals:?}");
}

#[test]
fn single_point_sweep_matches_a_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &[&["sweep", "--eps-list", "5e-3", "--seed", "3", "--out", "sw"][..], &LIVELY].concat());
    ok(d, &[&["run", "--eps", "5e-3", "--seed", "3", "--out", "r"][..], &LIVELY].concat());
    let text = read(&d.join("sw"), "sweep.csv");
    let s = summary(d, "r");
    assert_eq!(csv_column(&text, "total_flops"), vec![s["total_flops"].to_string()]);
    assert_eq!(csv_column(&text, "locks"), vec![s["locks"].to_string()]);
}

#[test]
fn seeds_give_distinct_rows() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &[&["sweep", "--seed-list", "1,2", "--out", "sw"][..], &LIVELY].concat());
    let text = read(&d.join("sw"), "sweep.csv");
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0], rows[1]);
}

#[test]
fn empty_grid_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = surelock(tmp.path(), &["sweep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"run": {"steps": 16, "gen_lenn": 4}}"#).unwrap();
    assert_eq!(surelock(d, &["run", "-c", "bad.json"]).status.code(), Some(2));
    assert_eq!(surelock(d, &["run", "-c", "missing.json"]).status.code(), Some(2));
    assert_eq!(surelock(d, &["run", "--steps", "0"]).status.code(), Some(2));
    assert_eq!(surelock(d, &["run", "--weights", "nope.json"]).status.code(), Some(2));
}

#[test]
fn config_file_drives_the_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("c.json"),
        r#"{"init_std": 0.3, "run": {"mode": "hybrid", "prompt_len": 4, "gen_len": 8, "steps": 8,
            "policy": {"hybrid_fraction": 0.5}}, "out_dir": "from_file"}"#,
    )
    .unwrap();
    ok(d, &["run", "-c", "c.json"]);
    let s = summary(d, "from_file");
    assert_eq!(s["config"]["run"]["mode"], "hybrid");
    assert_eq!(s["tokens"].as_array().unwrap().len(), 12);
}

#[test]
fn simulate_reports_every_trajectory() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(tmp.path(), &["simulate", "--count", "200", "--out", "sim"]);
    assert!(stdout.contains("200/200 bound holds"), "{stdout}");
    assert_eq!(csv_column(&read(&tmp.path().join("sim"), "simulate.csv"), "holds").len(), 200);
}

#[test]
fn flops_check_matches_the_worked_example() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(tmp.path(), &["flops-check"]);
    assert!(stdout.contains("F_base 11264"), "{stdout}");
}

#[test]
fn verify_bound_reads_stored_logits() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[&["run", "--mode", "baseline", "--write-logits", "--eps", "5e-3", "--out", "r"][..], &LIVELY].concat(),
    );
    let stdout = ok(d, &["verify-bound", "--trace", "r/logits.jsonl", "--eps", "5e-3", "--out", "vb"]);
    assert!(stdout.contains("bound holds"), "{stdout}");
    let report: Value = serde_json::from_str(&read(&d.join("vb"), "bound.json")).unwrap();
    assert_eq!(report["trajectories"], 32);
    assert_eq!(report["applicable"], report["holds"]);
    assert!(report["locked"].as_u64().unwrap() > 0);
}

#[test]
fn constants_are_written() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["constants", "--samples", "200", "--out", "c"]);
    let c: Value = serde_json::from_str(&read(&d.join("c"), "constants.json")).unwrap();
    assert!(c["l_sm"].as_f64().unwrap() > 0.0);
    assert_eq!(c["layers"].as_array().unwrap().len(), 2);
}
