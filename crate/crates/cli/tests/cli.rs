use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn diffusim(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffusim"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("DIFFUSIM_THREADS", t.to_string());
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn preset(name: &str) -> Value {
    serde_json::from_str(diffusim::presets::find(name).unwrap().json).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn column(path: &Path, k: usize) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(k).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn presets_list_names_every_preset() {
    let out = diffusim(&["presets", "list"], None);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for p in diffusim::presets::PRESETS {
        assert!(text.contains(p.name), "{} missing", p.name);
    }
}

#[test]
fn simulate_example1_scalar_emits_five_curves() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("out");
    let out = diffusim(
        &["simulate", "--preset", "example1-scalar", "--trials", "4", "--iterations", "300", "--out"],
        None,
    );
    assert_eq!(code(&out), 2, "missing --out value must be a usage error");
    let out = diffusim(
        &[
            "simulate", "--preset", "example1-scalar", "--trials", "4", "--iterations", "300",
            "--out", out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files = csvs(&out_dir);
    assert_eq!(files.len(), 5);
    for (name, bytes) in &files {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,measure,source,value_linear,value_db"));
        assert_eq!(lines.count(), 300, "{name}");
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("simulation_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["communication_per_iteration"]["values_sent"], 8);
    assert_eq!(summary["communication_total"]["values_sent"], 8 * 300);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 1);
    assert_eq!(manifest["config"]["run"]["trials"], 4);
    assert_eq!(manifest["scenario"], "preset:example1-scalar");
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("a");
    let args = |dir: &Path| {
        vec![
            "simulate".to_string(),
            "--preset".into(),
            "example1-singlebit".into(),
            "--trials".into(),
            "70".into(),
            "--iterations".into(),
            "200".into(),
            "--out".into(),
            dir.to_str().unwrap().into(),
        ]
    };
    let run = |dir: &Path, threads| {
        let a = args(dir);
        let out = diffusim(&a.iter().map(String::as_str).collect::<Vec<_>>(), Some(threads));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    };
    run(&first, 1);
    for (k, threads) in [4, 3].into_iter().enumerate() {
        let dir = tmp.path().join(format!("b{k}"));
        run(&dir, threads);
        assert_eq!(csvs(&first), csvs(&dir));
    }
    let again = tmp.path().join("c");
    let manifest = first.join("manifest.json");
    let out = diffusim(
        &["simulate", "--config", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()],
        Some(2),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csvs(&first), csvs(&again));
    let m: Value = serde_json::from_str(&fs::read_to_string(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenario"], "preset:example1-singlebit");
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("o");
    let o = out_dir.to_str().unwrap();

    let out = diffusim(&["analyze", "--preset", "no-such", "--out", o], None);
    assert_eq!(code(&out), 2);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\n  \"network\": [1,\n").unwrap();
    let out = diffusim(&["simulate", "--config", bad.to_str().unwrap(), "--out", o], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));

    let mut cfg = preset("example1-scalar");
    cfg["algorithm"]["mu"] = Value::from(-0.1);
    let p = write_config(tmp.path(), "neg.json", &cfg);
    let out = diffusim(&["simulate", "--config", p.to_str().unwrap(), "--out", o], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("algorithm.mu"), "{}", stderr(&out));

    let missing = tmp.path().join("missing.json");
    let out = diffusim(&["simulate", "--config", missing.to_str().unwrap(), "--out", o], None);
    assert_ne!(code(&out), 0);

    let out = diffusim(&["simulate", "--out", o], None);
    assert_eq!(code(&out), 2);
}

#[test]
fn adaptive_confidence_theory_exits_4() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().join("o");
    let out = diffusim(
        &["analyze", "--preset", "example2-scalar", "--iterations", "10", "--out", o.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("adaptive"), "{}", stderr(&out));
    let out = diffusim(
        &["analyze", "--preset", "example1-full", "--iterations", "10", "--out", o.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 4);
}

#[test]
fn analyze_example1_scalar_reports_finite_steady_state() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().join("o");
    let out = diffusim(
        &["analyze", "--preset", "example1-scalar", "--iterations", "500", "--out", o.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s: Value = serde_json::from_str(&fs::read_to_string(o.join("theory_summary.json")).unwrap()).unwrap();
    let rho = s["spectral_radius"].as_f64().unwrap();
    assert!(rho > 0.9 && rho < 1.0);
    for v in s["steady_state"].as_object().unwrap().values() {
        let x = v["linear"].as_f64().unwrap();
        assert!(x.is_finite() && x > 0.0);
    }
    assert_eq!(csvs(&o).len(), 5);
}

#[test]
fn zero_step_gives_flat_curves_then_exits_3() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = preset("example1-scalar");
    cfg["algorithm"]["mu"] = Value::from(0.0);
    cfg["run"]["iterations"] = Value::from(100);
    let p = write_config(tmp.path(), "mu0.json", &cfg);
    let o = tmp.path().join("o");
    let out = diffusim(&["analyze", "--config", p.to_str().unwrap(), "--out", o.to_str().unwrap()], None);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("spectral radius"));
    for name in ["theory_MSD_phi.csv", "theory_MSD_w_ATC.csv", "theory_MSD_construction.csv"] {
        let v = column(&o.join(name), 3);
        assert_eq!(v.len(), 100);
        assert!(v[0] > 0.0);
        assert!(v.iter().all(|&x| (x - v[0]).abs() <= 1e-12 * v[0]), "{name} is not flat");
    }
    let s: Value = serde_json::from_str(&fs::read_to_string(o.join("theory_summary.json")).unwrap()).unwrap();
    assert_eq!(s["stable"], false);
}

#[test]
fn zero_noise_degenerate_compare_has_zero_gap() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = preset("example1-scalar");
    cfg["algorithm"]["mu"] = Value::from(0.0);
    cfg["statistics"]["noise_stddev"] = Value::from(0.0);
    cfg["run"]["iterations"] = Value::from(120);
    cfg["run"]["trials"] = Value::from(3);
    let p = write_config(tmp.path(), "zero.json", &cfg);
    let o = tmp.path().join("o");
    let out = diffusim(&["compare", "--config", p.to_str().unwrap(), "--out", o.to_str().unwrap()], None);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let s: Value =
        serde_json::from_str(&fs::read_to_string(o.join("comparison_summary.json")).unwrap()).unwrap();
    let measures = s["measures"].as_object().unwrap();
    assert_eq!(measures.len(), 5);
    for (m, a) in measures {
        assert!(a["max_abs_db_gap"].as_f64().unwrap() < 1e-9, "{m}");
        assert!(a["steady_state_db_gap"].as_f64().unwrap() < 1e-9, "{m}");
    }
}

#[test]
fn compare_reuses_simulation_and_rejects_length_mismatch() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    let cmp = tmp.path().join("cmp");
    let out = diffusim(
        &[
            "simulate", "--preset", "example1-scalar", "--trials", "8", "--iterations", "400",
            "--out", sim.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let base = [
        "compare", "--preset", "example1-scalar", "--trials", "8", "--from-sim", sim.to_str().unwrap(),
        "--out", cmp.to_str().unwrap(), "--iterations",
    ];
    let mut args = base.to_vec();
    args.push("400");
    let out = diffusim(&args, None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s: Value =
        serde_json::from_str(&fs::read_to_string(cmp.join("comparison_summary.json")).unwrap()).unwrap();
    for m in ["MSD_phi", "EMSE_phi", "MSD_w_ATC", "EMSE_w_ATC", "MSD_construction"] {
        assert!(s["measures"][m]["max_abs_db_gap"].as_f64().unwrap().is_finite(), "{m}");
    }
    assert!(cmp.join("comparison.csv").exists());

    let mut args = base.to_vec();
    args.push("399");
    let out = diffusim(&args, None);
    assert_eq!(code(&out), 2);
}
