use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmk")).args(args).output().expect("spawn pmk")
}

fn last_json(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("no stdout");
    serde_json::from_str(line).expect("last line is not JSON")
}

fn tiny_spec(dir: &Path) -> String {
    let p = dir.join("spec.json");
    fs::write(
        &p,
        r#"{"num_classes": 3, "samples_per_class": 6, "min_frames": 8, "max_frames": 10, "height": 16, "width": 16, "seed": 4}"#,
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("pmk: error[usage]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_data_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let out = run(&["--tau=-1", "train", "--data", &spec, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_a_manifest_with_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth", "--out", dir.path().to_str().unwrap(), "--num-classes", "2", "--samples-per-class", "5",
        "--min-frames", "8", "--max-frames", "8", "--height", "16", "--width", "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = last_json(&out);
    assert_eq!(v["records"], 10);
    assert_eq!(v["train"].as_u64().unwrap() + v["val"].as_u64().unwrap(), 10);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn deterministic_training_is_byte_identical_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let train = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "--deterministic", "--seed", "3", "--epochs", "2", "--lr", "1e-3", "train", "--beta", "1", "--gamma", "1",
            "--data", &spec, "--out", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (out_dir, last_json(&out))
    };
    let (a, sa) = train("a");
    let (b, _) = train("b");
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert!(a.join("timings.json").exists());

    let ckpt = a.join("checkpoints").join("best");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &spec]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = last_json(&out);
    assert_eq!(e["value"].as_f64().unwrap(), sa["best_metric"].as_f64().unwrap());
}

#[test]
fn sweep_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "--deterministic", "--epochs", "1", "--model", "baseline", "sweep", "--data", &spec, "--beta", "0,1",
        "--gamma", "0,2", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json(&out)["cells"], 4);
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
    for cell in ["b0_g0", "b0_g2", "b1_g0", "b1_g2"] {
        assert!(out_dir.join(cell).join("metrics.json").exists(), "{cell}");
    }
}

#[test]
fn bench_reports_throughput() {
    let out = run(&["--deterministic", "bench", "--shape", "2x3x8x8", "--frames", "4", "--reps", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = last_json(&out);
    assert!(v.as_object().unwrap().values().any(|x| x.is_number()));
}
