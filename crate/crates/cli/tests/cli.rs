use std::path::Path;
use std::process::{Command, Output};

fn rffi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rffi"))
        .args(args)
        .env_remove("RFF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

const TINY: &str = r#"{
  "devices": {"count": 2},
  "data": {"packets_per_device": 12, "target_packets_per_device": 20},
  "model": {
    "backbone": {"widths": [4, 6], "kernel_sizes": [3, 3], "pool_factors": [2, 2]},
    "projector_hidden": 8, "projector_out": 8, "predictor_hidden": 4, "classifier_hidden": 4
  },
  "pretrain": {"epochs": 2, "batch_size": 8, "nmi_window": 2, "nmi_restarts": 2},
  "finetune": {"label_fraction": 0.1, "patience": 2, "max_epochs": 3},
  "eval": {"snr_db": [5.0, 20.0], "nmi_restarts": 2}
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let common = ["--config", config.as_str(), "--out", out_s, "--seed", "5", "--deterministic"];

    for cmd in ["gen", "pretrain", "finetune", "eval"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        let o = rffi(&args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let v = stdout_json(&o);
        assert_eq!(v["config_hash"].as_str().map(str::len).unwrap_or(64), 64);
    }

    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("mixed").join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["snr_sweep"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["per_class_accuracy"].as_array().unwrap().len(), 2);
    assert!(out.join("mixed").join("features.csv").exists());

    let o = rffi(&["inspect", out.join("source.rffd").to_str().unwrap()]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["kind"], "dataset");
    assert_eq!(v["info"]["packets_per_device"], 12);

    let o = rffi(&["inspect", out.join("mixed").join("model.ckpt").to_str().unwrap()]);
    let v = stdout_json(&o);
    assert_eq!(v["kind"], "checkpoint");
    assert_eq!(v["info"]["num_classes"], 2);

    let o = rffi(&["inspect", out.join("target.mmse").to_str().unwrap()]);
    assert_eq!(stdout_json(&o)["kind"], "mmse_statistics");
}

#[test]
fn supervised_mode_skips_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", config.as_str(), "--out", out.to_str().unwrap(), "--mode", "supervised"];
    let mut last = serde_json::Value::Null;
    for cmd in ["gen", "pretrain", "finetune"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        let o = rffi(&args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        last = stdout_json(&o);
    }
    // 70% of 20 packets per device.
    assert_eq!(last["labeled_packets"], 28);
    assert!(!out.join("supervised").join("pretrain_report.json").exists());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"data": {"mmse_samples": 5}}"#).unwrap();
    assert_eq!(rffi(&["gen", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"epochs": 3}"#).unwrap();
    assert_eq!(rffi(&["gen", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("nothing-here");
    let o = rffi(&["pretrain", "--out", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rffi(&["inspect", missing.to_str().unwrap()]).status.code(), Some(3));

    let corrupt = dir.path().join("corrupt.bin");
    std::fs::write(&corrupt, b"NOTMAGIC and some bytes").unwrap();
    assert_eq!(rffi(&["inspect", corrupt.to_str().unwrap()]).status.code(), Some(5));

    assert_ne!(rffi(&["gen", "--mode", "sideways"]).status.code(), Some(0));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_rffi"))
        .args(["gen", "--config", config.as_str(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("RFF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_rffi"))
        .args(["gen", "--config", config.as_str(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("RFF_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
