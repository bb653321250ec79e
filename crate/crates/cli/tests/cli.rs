use std::path::Path;
use std::process::{Command, Output};

fn phnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(path: &Path, json: serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_with_one() {
    let o = phnet(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("frobnicate"));
    let o = phnet(&["gen-data", "--out", "x", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
    assert_eq!(code(&phnet(&[])), 1);
    assert_eq!(code(&phnet(&["bench", "--dims", "4,4"])), 1);
}

#[test]
fn help_lists_every_subcommand() {
    let o = phnet(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-data", "train", "eval", "bench", "flops", "grad-check"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let o = phnet(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--config"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let o = phnet(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("spec.json");
    write(
        &spec,
        serde_json::json!({
            "dims": [4, 16, 16], "spacing_mm": [1.0, 1.0, 4.0], "num_classes": 2,
            "blobs_per_class": [1, 2], "radius_mm": [3.0, 6.0], "intensity_means": [0.0, 1.0],
            "noise_sigma": 0.3, "seed": 5
        }),
    );
    let data = d.join("data");
    let o = phnet(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--cases", "8", "--val", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..8 {
        for f in ["img.hdr", "img.raw", "lbl.hdr", "lbl.raw"] {
            assert!(data.join(format!("case_{i:03}_{f}")).exists());
        }
    }
    assert!(data.join("manifest.json").exists());

    let run = d.join("run.json");
    write(
        &run,
        serde_json::json!({
            "model": {
                "num_stages": 3, "base_channels": 4, "max_channels": 16, "in_channels": 1, "num_classes": 2,
                "spacing_mm": [1.0, 1.0, 4.0], "patch_dhw": [4, 16, 16], "blocks_per_stage": 1
            },
            "train": { "epochs": 1, "batch_size": 3, "patches_per_case": 2 },
            "data": data
        }),
    );
    let out = d.join("out");
    let o = phnet(&["train", "--config", run.to_str().unwrap(), "--out", out.to_str().unwrap(), "--lr", "1e-3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("run.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 1 epoch × 6 training cases × 2 patches / 3 per batch, plus the epoch record.
    assert_eq!(records.iter().filter(|r| r["kind"] == "step").count(), 4);
    assert_eq!(records.last().unwrap()["kind"], "epoch");
    assert!(out.join("best.ckpt").exists());

    let csv = d.join("metrics.csv");
    let o = phnet(&[
        "eval", "--checkpoint", out.join("best.ckpt").to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case,class,dice,iou,sd,nvd,hd,error");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[3].starts_with("mean,all,"));
}

#[test]
fn flops_and_bench_report_the_same_counters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    write(
        &cfg,
        serde_json::json!({
            "num_stages": 3, "base_channels": 4, "max_channels": 16, "in_channels": 1, "num_classes": 2,
            "spacing_mm": [1.0, 1.0, 4.0], "patch_dhw": [4, 16, 16]
        }),
    );
    let c = cfg.to_str().unwrap();
    let f = phnet(&["flops", "--config", c]);
    assert_eq!(code(&f), 0, "{}", String::from_utf8_lossy(&f.stderr));
    let f: serde_json::Value = serde_json::from_slice(&f.stdout).unwrap();
    let layer_sum: u64 = f["layers"].as_array().unwrap().iter().map(|l| l["flops"].as_u64().unwrap()).sum();
    assert_eq!(f["flops"].as_u64().unwrap(), layer_sum);
    assert_eq!(f["mixer_scaling"]["in_plane_ratio"], 2.0);
    assert_eq!(f["mixer_scaling"]["dense_ratio"], 4.0);

    let b = phnet(&["bench", "--config", c, "--repeats", "2"]);
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    let b: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(b["flops"], f["flops"]);
    assert_eq!(b["params"], f["params"]);
    assert!(b["throughput"].as_f64().unwrap() > 0.0);

    let bad = phnet(&["bench", "--config", c, "--dims", "4,15,16"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn grad_check_subcommand_passes() {
    let o = phnet(&["grad-check", "--input-samples", "10", "--per-param", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["input"].as_f64().unwrap() < 1e-4);
    assert!(r["params"].as_f64().unwrap() < 1e-4);
}
