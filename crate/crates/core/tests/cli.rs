use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cot_core::io::{read_json, write_json, write_logits_csv, Manifest, ManifestEntry};
use cot_core::synth::{Severity, SimulationConfig};
use cot_core::types::{LabelDistribution, LogitsDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn cot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cot")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cot(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Logits `ln p` with labels drawn from `p`: calibrated at T = 1 by construction.
fn calibrated(n: usize, k: usize, seed: u64) -> LogitsDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(4) + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let y = p.iter().position(|&q| {
                acc += q;
                u < acc
            });
            (Some(y.unwrap_or(k - 1)), p.iter().map(|q| q.ln()).collect())
        })
        .collect();
    LogitsDataset::new(k, rows).unwrap()
}

fn small_sim() -> SimulationConfig {
    let mut c = SimulationConfig::default_sweep();
    c.source.n_samples = 2000;
    c.target_samples = 300;
    c.severities = [(0.85, 1.0), (0.7, 1.1), (0.55, 1.2), (0.4, 1.3)]
        .iter()
        .map(|&(accuracy, extra_temperature)| Severity {
            accuracy,
            extra_temperature,
        })
        .collect();
    c
}

#[test]
fn emd_prints_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "weight,x_0,x_1,x_2\n1,0.8,0.1,0.1\n").unwrap();
    fs::write(&b, "weight,x_0,x_1,x_2\n1,1,0,0\n").unwrap();
    let out = ok(&["emd", s(&a), s(&b)]);
    let value: f64 = out.lines().next().unwrap().strip_prefix("emd ").unwrap().parse().unwrap();
    assert!((value - 0.4).abs() < 1e-12, "{out}");
}

#[test]
fn calibrate_recovers_unit_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.csv");
    let out = dir.path().join("cal.json");
    write_logits_csv(&val, &calibrated(5000, 4, 1)).unwrap();
    ok(&["calibrate", "--val", s(&val), "--out", s(&out)]);
    let cal: Value = read_json(&out).unwrap();
    let t = cal["temperature"].as_f64().unwrap();
    assert!((1e-2..=1e2).contains(&t));
    assert!((t - 1.0).abs() <= 0.1, "temperature {t}");
    assert_eq!(cal["schema_version"], 1);
}

#[test]
fn calibrate_rejects_unlabeled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.csv");
    fs::write(&val, "label,logit_0,logit_1\n0,1,0\n-1,0,1\n1,0,2\n").unwrap();
    let out = cot(&["calibrate", "--val", s(&val), "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 1") && err.contains("line 3"), "{err}");
}

#[test]
fn parse_errors_exit_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.csv");
    fs::write(&val, "label,logit_0,logit_1\n0,1,0\n1,zz,0\n").unwrap();
    let out = cot(&["calibrate", "--val", s(&val), "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn estimate_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.csv");
    let data = calibrated(400, 3, 2);
    write_logits_csv(&target, &data).unwrap();
    let cal = dir.path().join("cal.json");
    fs::write(
        &cal,
        r#"{"temperature": 1.0, "num_classes": 3, "nll_before": 1.0, "nll_after": 1.0,
            "ece_before": 0.0, "ece_after": 0.0, "accuracy": 0.5}"#,
    )
    .unwrap();

    // AC is one minus the mean max-confidence
    let report: Value = serde_json::from_str(&ok(&[
        "estimate", "--method", "AC", "--target", s(&target), "--calibration", s(&cal),
    ]))
    .unwrap();
    let mean_conf: f64 = data
        .rows()
        .map(|z| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / z.iter().map(|v| (v - m).exp()).sum::<f64>()
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!((report["estimate"].as_f64().unwrap() - (1.0 - mean_conf)).abs() < 1e-12);
    assert_eq!(report["method"], "AC");
    assert_eq!(report["direct"], true);

    // GDE with the same file twice
    let report: Value = serde_json::from_str(&ok(&[
        "estimate", "--method", "GDE", "--target", s(&target), "--second-target", s(&target),
        "--calibration", s(&cal),
    ]))
    .unwrap();
    assert_eq!(report["estimate"].as_f64(), Some(0.0));

    // missing prerequisites name the missing input
    for (args, needle) in [
        (vec!["estimate", "--method", "COT", "--target", s(&target), "--calibration", s(&cal)], "--val"),
        (vec!["estimate", "--method", "GDE", "--target", s(&target), "--calibration", s(&cal)], "--second-target"),
        (vec!["estimate", "--method", "ATC_MC", "--target", s(&target), "--calibration", s(&cal)], "--val"),
    ] {
        let out = cot(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(needle));
    }
}

#[test]
fn estimate_cot_with_label_distribution_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.csv");
    write_logits_csv(&target, &calibrated(300, 3, 3)).unwrap();
    let dist = dir.path().join("dist.json");
    write_json(&dist, &LabelDistribution::new(vec![0.5, 0.25, 0.25]).unwrap()).unwrap();
    let out = dir.path().join("r.json");
    let printed = ok(&[
        "estimate", "--target", s(&target), "--label-dist", s(&dist), "--batch-size", "100",
        "--seed", "5", "--out", s(&out),
    ]);
    assert!(printed.starts_with("COT estimate"));
    let report: Value = read_json(&out).unwrap();
    assert_eq!(report["batches"].as_array().unwrap().len(), 3);
    assert_eq!(report["meta"]["seed"], 5);
    let first = fs::read(&out).unwrap();
    ok(&[
        "estimate", "--target", s(&target), "--label-dist", s(&dist), "--batch-size", "100",
        "--seed", "5", "--out", s(&out),
    ]);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn simulate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    write_json(&config, &small_sim()).unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&config), "--out-dir", s(&sim)]);
    let manifest: Manifest = read_json(&sim.join("manifest.json")).unwrap();
    assert_eq!(manifest.targets.len(), 4);
    assert!(manifest.targets.iter().all(|t| t.true_error.is_some() && !t.path.starts_with('/')));

    let run = |out: &Path| {
        ok(&[
            "evaluate", "--manifest", s(&sim.join("manifest.json")), "--val", s(&sim.join("source.csv")),
            "--batch-size", "300", "--out-dir", s(out),
        ])
    };
    let out_a = dir.path().join("eval_a");
    let table = run(&out_a);
    for m in ["COT", "AC", "ENTROPY", "ATC_MC", "ATC_NE"] {
        assert!(table.contains(m), "{table}");
        assert!(out_a.join(format!("{m}.json")).exists());
        assert!(out_a.join(format!("{m}_scatter.csv")).exists());
    }
    assert!(!table.contains("GDE"));
    let entropy: Value = read_json(&out_a.join("ENTROPY.json")).unwrap();
    assert!(entropy["mae"].is_null());

    let out_b = dir.path().join("eval_b");
    run(&out_b);
    for name in ["summary.json", "COT.json", "targets/target_02.json"] {
        assert_eq!(fs::read(out_a.join(name)).unwrap(), fs::read(out_b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn evaluate_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated(200, 3, 4);
    write_logits_csv(&dir.path().join("a.csv"), &data).unwrap();
    let entry = |id: &str, err: Option<f64>| ManifestEntry {
        target_id: id.into(),
        path: "a.csv".into(),
        true_error: err,
        second_path: None,
    };
    let args = |m: &Path| {
        vec![
            "evaluate".to_string(),
            "--manifest".into(),
            m.display().to_string(),
            "--label-dist".into(),
            s(&dir.path().join("d.json")).to_string(),
            "--out-dir".into(),
            s(&dir.path().join("out")).to_string(),
        ]
    };
    write_json(&dir.path().join("d.json"), &LabelDistribution::uniform(3).unwrap()).unwrap();

    let single = dir.path().join("single.json");
    write_json(&single, &Manifest { schema_version: 1, targets: vec![entry("a", Some(0.1))] }).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cot")).args(args(&single)).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    write_json(
        &missing,
        &Manifest { schema_version: 1, targets: vec![entry("a", Some(0.1)), entry("b", None)] },
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cot")).args(args(&missing)).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("true_error"));
}

#[test]
fn evaluate_exact_predictions() {
    // true errors set to the AC estimate of each target: MAE 0 and R^2 1
    let dir = tempfile::tempdir().unwrap();
    let mut targets = Vec::new();
    for i in 0..4 {
        let data = calibrated(150, 3, 10 + i);
        let name = format!("t{i}.csv");
        write_logits_csv(&dir.path().join(&name), &data).unwrap();
        let mean_conf: f64 = data
            .rows()
            .map(|z| {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                1.0 / z.iter().map(|v| (v - m).exp()).sum::<f64>()
            })
            .sum::<f64>()
            / data.len() as f64;
        targets.push(ManifestEntry {
            target_id: format!("t{i}"),
            path: name,
            true_error: Some(1.0 - mean_conf),
            second_path: None,
        });
    }
    let manifest = dir.path().join("m.json");
    write_json(&manifest, &Manifest { schema_version: 1, targets }).unwrap();
    let dist = dir.path().join("d.json");
    write_json(&dist, &LabelDistribution::uniform(3).unwrap()).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "evaluate", "--manifest", s(&manifest), "--label-dist", s(&dist), "--methods", "AC",
        "--out-dir", s(&out),
    ]);
    let report: Value = read_json(&out.join("AC.json")).unwrap();
    assert!(report["mae"].as_f64().unwrap() < 1e-9);
    assert!((report["r_squared"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let scatter = fs::read_to_string(out.join("AC_scatter.csv")).unwrap();
    assert!(scatter.starts_with("target_id,predicted,true_error\nt0,"));
}

#[test]
fn simulate_requires_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = cot(&["simulate", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    let mut c = small_sim();
    c.source.accuracy = 2.0;
    write_json(&bad, &c).unwrap();
    let out = cot(&["simulate", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
