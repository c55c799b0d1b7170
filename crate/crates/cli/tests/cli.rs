use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msdscope(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msdscope"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn simulate_small(dir: &Path, out: &str) {
    let o = msdscope(&["simulate", "--preset", "fast-bm", "--size", "64", "--frames", "64", "--seed", "5", "--out", out], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn desk_preset_is_small_and_documented() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "sim");
    let stack = fs::metadata(tmp.path().join("sim/stack.raw")).unwrap().len();
    assert!(stack < 2 * 1024 * 1024, "{stack} bytes");
    assert_eq!(csv_rows(&tmp.path().join("sim/true_msd.csv")).len(), 63);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sim/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config"]["seed"], 5);
    assert_eq!(prov["config"]["simulate"]["preset"], "fast-bm");
    assert!(prov["git_hash"].is_string());
}

#[test]
fn replaying_the_written_config_reproduces_the_stack() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "a");
    let o = msdscope(&["simulate", "--config", "a/config.toml", "--out", "b"], tmp.path());
    assert!(o.status.success());
    assert_eq!(fs::read(tmp.path().join("a/stack.raw")).unwrap(), fs::read(tmp.path().join("b/stack.raw")).unwrap());
}

#[test]
fn missing_model_parameter_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[model]\nkind = \"bm\"\n").unwrap();
    let o = msdscope(&["simulate", "--config", "bad.toml", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.sigma2"));
}

#[test]
fn print_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = msdscope(&["analyze", "--print-config", "--seed", "9"], tmp.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("n_s_max = 20"));
    fs::write(tmp.path().join("c.toml"), &text).unwrap();
    let o = msdscope(&["analyze", "--print-config", "--config", "c.toml"], tmp.path());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
}

#[test]
fn analyze_writes_all_lags_bounds_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "sim");
    let o = msdscope(&["analyze", "sim/stack.raw", "--out", "plain"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&tmp.path().join("plain/msd.csv"));
    assert_eq!(rows.len(), 63);
    assert!(rows.iter().all(|r| r[2].is_empty() && r[3].is_empty()));

    let o = msdscope(
        &["analyze", "sim/stack.raw", "--uq", "--particles", "100", "--baseline", "ddm-uq", "--out", "uq"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&tmp.path().join("uq/msd.csv"));
    for r in &rows {
        let v: Vec<f64> = r.iter().map(|c| c.parse().unwrap()).collect();
        assert!(v[2] <= v[1] && v[1] <= v[3]);
    }
    let base = csv_rows(&tmp.path().join("uq/msd_ddmuq.csv"));
    assert_eq!(base.len(), 63);
    assert!(base.iter().all(|r| (r[2] == "1.0000000000000000e0") != r[1].is_empty()));
    assert!(tmp.path().join("uq/diagnostics.json").exists());
}

#[test]
fn flat_stack_exits_with_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (n1, n2, n) = (16usize, 16usize, 8usize);
    let stack = msdscope::ImageStack::new(n1, n2, n, 1.0, 1.0, vec![7.0; n1 * n2 * n]).unwrap();
    msdscope::stackio::write_stack(&stack, tmp.path().join("flat.raw")).unwrap();
    let o = msdscope(&["analyze", "flat.raw", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let o = msdscope(&["analyze", "missing.raw", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "sim");
    let mut seen = Vec::new();
    for t in ["1", "3"] {
        let out = format!("t{t}");
        let o = msdscope(&["analyze", "sim/stack.raw", "--uq", "--particles", "50", "--threads", t, "--out", &out], tmp.path());
        assert!(o.status.success());
        let msd = format!("{out}/msd.csv");
        let o = msdscope(&["moduli", &msd, "--temperature", "300", "--radius-nm", "500", "--threads", t, "--out", &out], tmp.path());
        assert!(o.status.success());
        seen.push((fs::read(tmp.path().join(&msd)).unwrap(), fs::read(tmp.path().join(&out).join("moduli.csv")).unwrap()));
    }
    assert!(seen[0] == seen[1]);
}

fn write_msd(path: &Path, lags: &[f64], msd: impl Fn(f64) -> f64) {
    let mut s = String::from("lag_time,msd\n");
    for &t in lags {
        s.push_str(&format!("{t},{}\n", msd(t)));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn newtonian_moduli_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let (kb, temp, r, eta) = (1.380649e-23, 298.0, 0.5e-6, 0.025);
    // 2D GSER with α = 1: θ(t) = 2 k_B T t / (3π r η), in µm²
    let slope = 2.0 * kb * temp / (3.0 * std::f64::consts::PI * r * eta) * 1e12;
    let lags: Vec<f64> = (1..=50).map(|k| k as f64 * 0.01).collect();
    write_msd(&tmp.path().join("newton.csv"), &lags, |t| slope * t);
    let o = msdscope(&["moduli", "newton.csv", "--temperature", "298", "--radius-nm", "500", "--out", "m"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&tmp.path().join("m/moduli.csv"));
    assert_eq!(rows.len(), 50);
    let mut last = 0.0;
    for r in rows {
        let v: Vec<f64> = r.iter().map(|c| c.parse().unwrap()).collect();
        assert!(v[0] > last);
        last = v[0];
        assert!((v[2] / v[0] / eta - 1.0).abs() < 0.01);
    }

    let o = msdscope(&["moduli", "newton.csv", "--radius-nm", "500", "--out", "m"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("moduli.temperature"));

    write_msd(&tmp.path().join("ballistic.csv"), &lags, |t| 0.1 * t.powf(1.5));
    let o = msdscope(
        &["moduli", "ballistic.csv", "--temperature", "298", "--radius-nm", "500", "--smooth", "poly4", "--out", "b"],
        tmp.path(),
    );
    assert!(o.status.success());
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("b/moduli_diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["method"], "poly4");
    assert_eq!(diag["nonphysical"], true);
}
