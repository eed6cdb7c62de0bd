use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fido_masks::classifier::ClassifierModel;
use fido_masks::tensor::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fido-masks"));
    c.env_remove("FIDO_MASKS_JOBS").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &[&str] = &[
    "--image-side",
    "16",
    "--patch-side",
    "4",
    "--train-per-class",
    "30",
    "--test-per-class",
    "5",
];

/// Small dataset and a briefly trained model.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let mut args = vec!["generate-dataset", "--out", s(&data), "--seed", "1"];
    args.extend_from_slice(SMALL);
    ok(&args);
    let model = root.join("model");
    ok(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "2"]);
    (data, model.join("model.fmwt"))
}

#[test]
fn generate_dataset_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["generate-dataset", "--out", s(out), "--seed", "1"];
        args.extend_from_slice(SMALL);
        ok(&args);
    }
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a).iter().filter(|(p, _)| p.ends_with("manifest.json")).count(), 1);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["generate-dataset", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate-dataset",
        "--out",
        s(dir.path()),
        "--patch-side",
        "64",
        "--image-side",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--patch-side") && msg.contains("--image-side"), "{msg}");

    let out = run(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epochs"));

    let out = run(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = run(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn help_prints_the_defaults_table() {
    let text = ok(&["--help"]);
    for needle in ["Defaults:", "temperature 0.1", "lambda 0.001", "FIDO_MASKS_JOBS"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn train_explain_benchmark_tta() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = setup(dir.path());
    ClassifierModel::load(&weights).unwrap();
    let model_dir = weights.parent().unwrap();
    let printed = fs::read_to_string(model_dir.join("accuracy.csv")).unwrap();
    let test_acc: f64 = printed.lines().find(|l| l.starts_with("test,")).unwrap()[5..].parse().unwrap();
    assert!(fs::read_to_string(model_dir.join("loss_curve.csv")).unwrap().starts_with("epoch,train_loss\n"));

    // Retraining with the same seed reproduces the weights.
    let again = dir.path().join("again");
    ok(&["train", "--data", s(&data), "--out", s(&again), "--epochs", "2"]);
    assert_eq!(fs::read(&weights).unwrap(), fs::read(again.join("model.fmwt")).unwrap());

    // Both objectives give the joint map; PNGs are round(255·θ).
    let ex = dir.path().join("explain");
    let quick = ["--steps", "5", "--batch-size", "2"];
    let mut args = vec!["explain", "--weights", s(&weights), "--data", s(&data), "--index", "2", "--out", s(&ex)];
    args.extend_from_slice(&["--objective", "ssr", "--objective", "sdr"]);
    args.extend_from_slice(&quick);
    let stdout = ok(&args);
    assert!(stdout.contains("joint:"));
    for name in ["ssr", "sdr", "joint"] {
        let raw = Tensor::<f64>::read_from(&mut fs::File::open(ex.join(format!("theta_{name}.tnsr"))).unwrap()).unwrap();
        let png = image::open(ex.join(format!("theta_{name}.png"))).unwrap().to_luma8();
        assert_eq!(raw.shape(), [16, 16]);
        for (v, p) in raw.data().iter().zip(png.pixels()) {
            assert_eq!((255.0 * v).round() as u8, p.0[0]);
        }
    }
    let overlay = image::open(ex.join("overlay.png")).unwrap();
    assert!(matches!(overlay, image::DynamicImage::ImageRgb8(_)));
    assert!(fs::read_to_string(ex.join("trace_ssr.csv"))
        .unwrap()
        .starts_with("step,loss,grad_mean_abs,grad_var,nonfinite_count\n"));

    // A single objective writes only its own map; a PNG input works too.
    let single = dir.path().join("single");
    let img = data.join("images").join("test_00001.png");
    let mut args = vec!["explain", "--weights", s(&weights), "--image", s(&img), "--objective", "sdr", "--out", s(&single)];
    args.extend_from_slice(&quick);
    ok(&args);
    assert!(single.join("theta_sdr.tnsr").exists());
    assert!(!single.join("theta_joint.tnsr").exists() && !single.join("theta_ssr.tnsr").exists());

    let bench = dir.path().join("bench");
    ok(&[
        "benchmark", "--weights", s(&weights), "--data", s(&data), "--batch-sizes", "2,4", "--steps", "3,6",
        "--images", "2", "--out", s(&bench),
    ]);
    let runs = fs::read_to_string(bench.join("runs.csv")).unwrap();
    assert!(runs.starts_with("formulation,objective,batch_size,steps,seed,image,iou,tv,nonfinite_count,grad_var\n"));
    // 2 formulations x 2 batch sizes x 2 step counts x 2 images x 3 maps.
    assert_eq!(runs.lines().count(), 1 + 2 * 2 * 2 * 2 * 3);
    assert_eq!(fs::read_to_string(bench.join("aggregate.csv")).unwrap().lines().count(), 1 + 2 * 2 * 2 * 3);
    assert!(bench.join("timings.csv").exists());

    let out = run(&[
        "benchmark", "--weights", s(&weights), "--data", s(&data), "--batch-sizes=", "--out", s(&bench),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let tta = dir.path().join("tta");
    ok(&[
        "tta", "--weights", s(&weights), "--data", s(&data), "--steps", "5", "--batch-size", "2", "--out", s(&tta),
    ]);
    let mut reader = csv::Reader::from_path(tta.join("tta.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["method", "accuracy", "mean_iou", "mean_tv", "batch_size", "steps", "formulation", "seed"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        if &r[0] == "none" {
            assert_eq!(acc, test_acc);
        }
    }

    for d in [model_dir, &again, &ex, &single, &bench, &tta] {
        let manifests = tree(d).into_iter().filter(|(p, _)| p.ends_with("manifest.json")).count();
        assert_eq!(manifests, 1, "{}", d.display());
        let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
        assert!(m["input_hashes"].as_object().is_some_and(|h| !h.is_empty()));
        assert!(m["wall_time_s"].is_number());
    }
}

#[test]
fn jobs_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("FIDO_MASKS_JOBS", "0")
        .args(["tta", "--weights", "w", "--data", "d", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
