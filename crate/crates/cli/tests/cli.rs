use std::path::Path;
use std::process::{Command, Output};

fn updp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_updp")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "arch": { "family": "micro_cnn", "resolution": 16, "classes": 4, "scale": "tiny", "blocks": 3 },
        "dataset": { "kind": "synthetic", "classes": 4, "samples_per_class": 10, "image_size": 16, "seed": 1 },
        "val_samples": 8,
        "supernet": { "epochs": 1, "optim": { "batch_size": 16, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005 } },
        "search": { "population": 3, "generations": 1, "mutation_rate": 0.1, "elite": 1, "tournament": 2, "eval_subset": 8 },
        "subnet": { "schedule": { "K": 2.0, "T": 2 }, "optim": { "batch_size": 16, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005 } },
        "k": 1,
        "seed": 0,
        "out_dir": dir.join("run")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn flops_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = updp(&["flops", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("MACs") && table.contains("total"));
    let log = String::from_utf8(out.stderr).unwrap();
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["stage"], "flops");
    }
}

#[test]
fn missing_checkpoint_fails_with_the_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = updp(&["merge", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("stage `merge`") && err.contains("`train-subnet`"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(!updp(&["train", "--config", &cfg]).status.success());
    assert!(!updp(&["train-subnet", "--config", &cfg, "--mask", "01x"]).status.success());
    let out = updp(&["search", "--config", "/nonexistent.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `search`"));
}

#[test]
fn explicit_mask_runs_through_to_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("masked");
    let out_dir = out_dir.to_str().unwrap();
    for stage in ["train-subnet", "merge", "verify", "report"] {
        let out = updp(&[stage, "--config", &cfg, "--mask", "010", "--out", out_dir]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(out_dir).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mask"], "010");
    assert!(Path::new(out_dir).join("report.txt").exists());
}
