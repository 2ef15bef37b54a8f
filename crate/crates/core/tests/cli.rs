use std::fs;
use std::process::Command;

use fol_lab::cli::{parse_measure, read_measure, run_experiment, write_measure, ExperimentConfig, ExperimentId};
use fol_lab::transport::DiscreteMeasure;
use fol_lab::Error;

#[test]
fn unknown_keys_are_rejected() {
    let top = ExperimentConfig::from_json(r#"{"experiment": "stability", "colour": 1}"#);
    assert!(matches!(top, Err(Error::Config(_))));
    let nested = ExperimentConfig::from_json(r#"{"experiment": "stability", "grids": {"rails": 64, "extra": 2}}"#);
    assert!(matches!(nested, Err(Error::Config(_))));
    let unknown_id = ExperimentConfig::from_json(r#"{"experiment": "nope"}"#);
    assert!(matches!(unknown_id, Err(Error::Config(_))));
}

#[test]
fn ranges_are_checked() {
    for bad in [
        r#"{"experiment": "anosov-decay", "beta": 0}"#,
        r#"{"experiment": "anosov-decay", "torus_map": {"epsilon": 0.5}}"#,
        r#"{"experiment": "stability", "grids": {"srb": 100, "transport": 38}}"#,
        r#"{"experiment": "stability", "epsilons": [0.0, 0.01]}"#,
        r#"{"experiment": "ot"}"#,
        r#"{"experiment": "expanding-decay", "output": {"results": "../x.csv"}}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
    let ok = ExperimentConfig::from_json(r#"{"experiment": "expanding-decay", "seed": 3}"#).unwrap();
    assert_eq!(ok.experiment, ExperimentId::ExpandingDecay);
    assert_eq!(ok.n_max(), 20);
}

#[test]
fn measure_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let n = 100;
    let pts: Vec<[f64; 2]> = (0..n).map(|k| [(k as f64 * 0.618034).fract(), (k as f64 * 0.414214).fract()]).collect();
    let w: Vec<f64> = (0..n).map(|k| 1.0 + (k as f64).sin().abs()).collect();
    let mu = DiscreteMeasure::normalized(2, pts, w).unwrap();
    let path = dir.path().join("mu.csv");
    write_measure(&path, &mu).unwrap();
    let back = read_measure(&path).unwrap();
    assert_eq!(back.measure.points(), mu.points());
    assert_eq!(back.measure.weights(), mu.weights());
    assert!(back.warning.is_none());
}

#[test]
fn measure_errors_and_renormalization() {
    let neg = parse_measure("x,y,weight\n0.1,0.2,0.5\n0.3,0.4,-0.5\n");
    assert!(matches!(neg, Err(Error::NegativeWeight { line: 3, .. })), "{neg:?}");
    let bad = parse_measure("x,weight\n0.1,0.5\n0.2,abc\n");
    assert!(matches!(bad, Err(Error::Parse { line: 3, .. })), "{bad:?}");
    let header = parse_measure("a,b\n0.1,1\n");
    assert!(matches!(header, Err(Error::Parse { line: 1, .. })));
    let two = parse_measure("x,weight\n0.25,1\n0.75,1\n").unwrap();
    assert!(two.warning.is_some());
    assert_eq!(two.raw_total, 2.0);
    assert_eq!(two.measure.weights(), &[0.5, 0.5]);
}

fn quick_expanding() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(r#"{"experiment": "expanding-decay", "seed": 5}"#).unwrap();
    cfg.birkhoff_samples = Some(200_000);
    cfg.grids.density = 1024;
    cfg
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = quick_expanding();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "results.csv"), read(&b, "results.csv"));
    assert_eq!(read(&a, "constants.json"), read(&b, "constants.json"));
    let csv = String::from_utf8(read(&a, "results.csv")).unwrap();
    assert!(csv.starts_with("n,correlation,abs_correlation,theta_power\n"));
    assert_eq!(csv.lines().count(), 22);
    let report: serde_json::Value = serde_json::from_slice(&read(&a, "report.json")).unwrap();
    assert_eq!(report["experiment"], "expanding-decay");
    assert_eq!(report["pass"], ra.pass);
    assert!(report["thresholds"].as_array().unwrap().len() >= 3);
    // every written float parses back to the value in the table
    let col = ra.table.column("correlation").unwrap();
    for (line, v) in csv.lines().skip(1).zip(col) {
        let parsed: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(parsed.to_bits(), v.to_bits());
    }
}

#[test]
fn binary_runs_experiments_and_transport() {
    let exe = env!("CARGO_BIN_EXE_fol-lab");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ed.json");
    fs::write(&cfg, r#"{"experiment": "expanding-decay", "birkhoff_samples": 100000, "grids": {"density": 1024}}"#).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(exe)
        .args(["expanding-decay", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .env("FOL_LAB_THREADS", "1")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["results.csv", "report.json", "constants.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // wrong experiment for the config
    let status = Command::new(exe).args(["stability", "--config"]).arg(&cfg).arg("--out-dir").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let mu = dir.path().join("mu.csv");
    let nu = dir.path().join("nu.csv");
    fs::write(&mu, "x,y,weight\n0.1,0.1,0.5\n0.6,0.2,0.5\n").unwrap();
    fs::write(&nu, "x,y,weight\n0.15,0.1,0.25\n0.6,0.3,0.75\n").unwrap();
    let ot_out = dir.path().join("ot");
    for (cost, method) in [("d", "exact"), ("d-beta", "exact"), ("stable", "exact"), ("d", "sinkhorn")] {
        let output = Command::new(exe)
            .args(["ot", "--mu"])
            .arg(&mu)
            .arg("--nu")
            .arg(&nu)
            .args(["--cost", cost, "--beta", "0.5", "--method", method, "--out-dir"])
            .arg(&ot_out)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{cost} {method}: {}", String::from_utf8_lossy(&output.stderr));
        assert!(String::from_utf8_lossy(&output.stdout).contains("cost = "));
    }
    let csv = fs::read_to_string(ot_out.join("results.csv")).unwrap();
    assert!(csv.starts_with("source,target,mass\n"));

    let missing = Command::new(exe).args(["ot", "--mu"]).arg(&mu).arg("--nu").arg(dir.path().join("none.csv")).status().unwrap();
    assert_eq!(missing.code(), Some(2));
}
