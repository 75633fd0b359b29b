use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calibkit::io::{load_model, read_logits, write_logits, ModelFile};
use calibkit::report::Report;
use calibkit::synth::{generate, SynthConfig};
use calibkit::{fit, FitOptions, Method};

fn calibkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibkit"))
        .args(args)
        .env("CALIBKIT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Files {
    _dir: tempfile::TempDir,
    root: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

fn files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let val = root.join("val.csv");
    let test = root.join("test.csv");
    write_logits(&generate(&SynthConfig::heteroscedastic(3_000, 1.0, 0.5, 1)).unwrap().dataset, &val).unwrap();
    write_logits(&generate(&SynthConfig::heteroscedastic(2_000, 1.0, 0.5, 2)).unwrap().dataset, &test).unwrap();
    Files {
        _dir: dir,
        root,
        val,
        test,
    }
}

const FAST: [&str; 6] = ["--steps", "300", "--batch-size", "200", "--lr", "0.001"];

#[test]
fn fit_then_eval_then_apply() {
    let f = files();
    let model = f.root.join("ts.json");
    let out = calibkit(&["fit", "--method", "ts", "--val", p(&f.val), "--out", p(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report_path = f.root.join("report.json");
    let out = calibkit(&[
        "eval", "--model", p(&model), "--test", p(&f.test), "--bins", "5,7,...,19", "--out", p(&report_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let block = report.method("ts").unwrap();
    let bins: Vec<usize> = block.ece_equal_width.iter().map(|e| e.bins).collect();
    assert_eq!(bins, vec![5, 7, 9, 11, 13, 15, 17, 19]);
    for e in &block.ece_equal_width {
        assert!((0.0..=1.0).contains(&e.value));
    }
    assert!(block.nll >= 0.0);

    let out = calibkit(&["apply", "--model", p(&model), "--test", p(&f.test)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("label,predicted_class,confidence,p0,"));
    assert_eq!(lines.count(), 2_000);
}

#[test]
fn compare_reports_every_method_and_is_deterministic() {
    let f = files();
    let methods = "ts,ets,pts,irova,irm,irova_ts,pbmc,histbin";
    let run = |name: &str| {
        let out_path = f.root.join(name);
        let mut args = vec![
            "compare", "--methods", methods, "--val", p(&f.val), "--test", p(&f.test), "--seed", "17", "--out",
            p(&out_path),
        ];
        args.extend(FAST);
        let out = calibkit(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_path).unwrap()
    };
    let val_before = std::fs::read(&f.val).unwrap();
    let a = run("a.json");
    let b = run("b.json");
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&f.val).unwrap(), val_before);

    let report: Report = serde_json::from_slice(&a).unwrap();
    let names: Vec<&str> = report.methods.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(names, vec!["base", "ts", "ets", "pts", "irova", "irm", "irova_ts", "pbmc", "histbin"]);
    let base_acc = report.method("base").unwrap().accuracy;
    for m in ["ts", "ets", "pts", "irm", "pbmc"] {
        assert_eq!(report.method(m).unwrap().accuracy, base_acc, "{m}");
    }
    assert!(!String::from_utf8(a).unwrap().contains("fit_seconds"));
}

#[test]
fn every_method_round_trips_through_a_model_file() {
    let f = files();
    let val = read_logits(&f.val).unwrap();
    let test = read_logits(&f.test).unwrap();
    let mut options = FitOptions::default();
    options.pts.steps = 200;
    options.pts.eval_every = 50;
    for method in Method::ALL {
        let cal = fit(method, &val, &options).unwrap();
        let path = f.root.join(format!("{method}.json"));
        calibkit::io::save_model(&cal, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let reparsed = ModelFile::from_json(&text).unwrap().to_json().unwrap();
        assert_eq!(reparsed, text, "{method}");
        let back = load_model(&path).unwrap();
        assert_eq!(back.calibrate(&test).unwrap(), cal.calibrate(&test).unwrap(), "{method}");
    }
}

#[test]
fn experiment_writes_csv_and_json() {
    let f = files();
    let out_dir = f.root.join("exp");
    let mut args = vec![
        "experiment", "loss_ablation", "--val", p(&f.val), "--test", p(&f.test), "--methods", "ets,pts", "--losses",
        "mse,ece", "--out", p(&out_dir),
    ];
    args.extend(FAST);
    let out = calibkit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("loss_ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("loss_ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);

    let mut args = vec![
        "experiment", "data_efficiency", "--samples", "1500", "--methods", "ts,irova", "--fractions", "0.5:1.0:0.5",
        "--out", p(&out_dir),
    ];
    args.extend(FAST);
    let out = calibkit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("data_efficiency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn synth_command_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("s.csv");
    let out = calibkit(&[
        "synth", "--regime", "overconfident-tail", "--base", "1", "--slope", "0.2", "--samples", "100", "--classes",
        "4", "--seed", "3", "--out", p(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = read_logits(&out_path).unwrap();
    assert_eq!((ds.len(), ds.num_classes()), (100, 4));
}

#[test]
fn exit_codes() {
    let f = files();
    // Usage errors.
    assert_eq!(calibkit(&["fit", "--method", "bogus", "--val", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(calibkit(&["experiment", "unknown"]).status.code(), Some(1));
    assert_eq!(calibkit(&[]).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_calibkit"))
        .args(["eval", "--test", p(&f.test)])
        .env("CALIBKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Data errors.
    let bad = f.root.join("bad.csv");
    std::fs::write(&bad, "label,z0,z1\n0,1,2\n5,0,0\n").unwrap();
    let out = calibkit(&["eval", "--test", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));
    assert_eq!(calibkit(&["eval", "--test", "/does/not/exist.csv"]).status.code(), Some(2));
    let model = f.root.join("broken.json");
    std::fs::write(&model, "{\"kind\": \"ts\"}").unwrap();
    assert_eq!(calibkit(&["apply", "--model", p(&model), "--test", p(&f.test)]).status.code(), Some(2));

    // Too few records for scaling-binning with the requested bins.
    let tiny = f.root.join("tiny.csv");
    std::fs::write(&tiny, "label,z0,z1\n0,1,2\n1,0,0\n0,2,1\n").unwrap();
    let out = calibkit(&["fit", "--method", "pbmc", "--val", p(&tiny), "--out", p(&f.root.join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
}
