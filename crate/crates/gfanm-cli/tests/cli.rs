use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gfanm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfanm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gfanm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_three(dir: &Path, snr: Option<&str>) -> PathBuf {
    let csv = dir.join("signal.csv");
    let mut args = vec![
        "simulate", "--freqs", "1.679497,2.0,2.320503", "--moduli", "8,4,2", "--phases", "0.3,1.7,4.0",
        "--length", "98", "--seed", "5", "--csv", s(&csv),
    ];
    if let Some(db) = snr {
        args.extend(["--snr-db", db, "--snr-ref", "2"]);
    }
    ok(&args);
    csv
}

#[test]
fn design_peaks_at_pole_phase() {
    let out = gfanm(&["design", "--filter", s(&scenario("filter20.json")), "--points", "10000"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncation length = 97"));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("theta,gain"));
    let (theta, _) = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap())
        })
        .fold((0.0, f64::MIN), |best, p| if p.1 > best.1 { p } else { best });
    assert!((theta - 2.0).abs() <= std::f64::consts::TAU / 10000.0);
}

#[test]
fn simulate_is_seeded_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("s.json");
    let args = [
        "simulate", "--freqs", "1.0", "--moduli", "1", "--length", "16", "--sigma2", "0.5", "--seed", "9",
    ];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    assert_eq!(a.lines().count(), 17);
    let mut with_json = args.to_vec();
    with_json.extend(["--json", s(&json)]);
    ok(&with_json);
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v.is_object());
}

#[test]
fn estimate_then_decompose_agree() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulate_three(dir.path(), Some("9"));
    let report = dir.path().join("report.json");
    let sigma = dir.path().join("sigma.json");
    let filter = scenario("filter20.json");
    ok(&[
        "estimate", "--filter", s(&filter), "--signal", s(&csv), "--out", s(&report), "--sigma-out", s(&sigma),
    ]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["m_hat"], 3);
    assert_eq!(r["certificate_ok"], true);
    let truth = [1.679497, 2.0, 2.320503];
    for (f, t) in r["freqs"].as_array().unwrap().iter().zip(truth) {
        assert!((f.as_f64().unwrap() - t).abs() < 1e-2);
    }

    let scan = dir.path().join("scan.csv");
    let dec = ok(&[
        "decompose", "--filter", s(&filter), "--sigma", s(&sigma), "--grid", "2000", "--scan", s(&scan),
    ]);
    let d: Value = serde_json::from_str(&dec).unwrap();
    assert_eq!(d["r"], 3);
    let scan_text = fs::read_to_string(&scan).unwrap();
    assert!(scan_text.starts_with("theta,dbar\n"));
    assert_eq!(scan_text.lines().count(), 2001);
}

#[test]
fn baselines_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulate_three(dir.path(), None);
    for method in ["music", "esprit"] {
        let v: Value = serde_json::from_str(&ok(&[
            "baseline", "--signal", s(&csv), "--method", method, "--order", "fixed:3",
        ]))
        .unwrap();
        assert_eq!(v["m_hat"], 3);
        assert_eq!(v["window"], 49);
    }
    let v: Value = serde_json::from_str(&ok(&[
        "baseline", "--signal", s(&csv), "--method", "anm-delay", "--delay-n", "12", "--no-dual",
    ]))
    .unwrap();
    assert!(v["m_hat"].as_u64().unwrap() >= 1);
    assert!(!gfanm(&["baseline", "--signal", s(&csv), "--method", "anm-delay"]).status.success());
    assert!(!gfanm(&["baseline", "--signal", s(&csv), "--method", "music", "--order", "true"]).status.success());
}

#[test]
fn montecarlo_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mc.csv");
    let noiseless = scenario("noiseless_three.json");
    let args = [
        "montecarlo", "--config", s(&noiseless), "--out", s(&out), "--trials", "2",
    ];
    ok(&args);
    let first = fs::read_to_string(&out).unwrap();
    ok(&args);
    assert_eq!(first, fs::read_to_string(&out).unwrap());
    assert!(first.starts_with("scenario_id,theta0_or_eta,snr_db,trial,method,m_hat,success,abs_error,elapsed_ms\n"));
    assert_eq!(first.lines().count(), 3);
    assert!(first.lines().skip(1).all(|l| l.contains(",ganm,3,true,")));

    let music = dir.path().join("music.csv");
    ok(&[
        "montecarlo", "--config", s(&noiseless), "--method", "music:true", "--out", s(&music),
    ]);
    let json = dir.path().join("summary.json");
    let summary = ok(&["report", "--input", s(&out), "--input", s(&music), "--json", s(&json), "--out", "/dev/stdout"]);
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("noiseless_three,2.0,inf,ganm,2,2,1.0,"));
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn montecarlo_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let missing = gfanm(&["montecarlo", "--config", s(&dir.path().join("none.json")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"id": "b", "filter": {"kind": "delay", "n": 4}, "length": 3}"#).unwrap();
    assert_eq!(gfanm(&["montecarlo", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    let method = gfanm(&["montecarlo", "--config", s(&scenario("noiseless_three.json")), "--method", "fft", "--out", s(&out)]);
    assert_eq!(method.status.code(), Some(2));
}

#[test]
fn bundled_scenarios_validate() {
    for name in ["three_cisoids.json", "seven_cisoids.json", "noiseless_three.json"] {
        let text = fs::read_to_string(scenario(name)).unwrap();
        let sc = gfanm_core::experiment::Scenario::from_json(&text).unwrap();
        sc.validate().unwrap();
    }
}
