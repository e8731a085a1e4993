use std::path::Path;
use std::process::{Command, Output};

use fedunlearn_core::experiment::RunReport;

const CONFIG: &str = r#"{
  "model": {"kind": "softmax-classifier", "input_dim": 6, "num_classes": 3, "lambda_reg": 0.001},
  "dataset": {"synth": {"n_train": 600, "n_test": 150}},
  "federation": {"clients": 4, "rounds": 5, "batch_size": 32},
  "optimizer": {"eta": 0.01, "block_size": 2},
  "unlearning": {"deletion_rate": 0.02, "unlearned_clients": 2}
}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedunlearn"));
    cmd.env_remove("FEDUNLEARN_OUT_DIR");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--out-dir").arg(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, config).unwrap();
    let p = path.to_str().unwrap().to_string();
    (dir, p)
}

#[test]
fn full_workflow() {
    let (dir, cfg) = setup(CONFIG);
    let d = dir.path();
    let o = run(d, &["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("train.ckpt").exists() && d.join("train.report.json").exists());
    let ckpt = d.join("train.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    for args in [
        vec!["unlearn", "--config", &cfg, "--checkpoint", ckpt, "--method", "fim"],
        vec!["unlearn", "--config", &cfg, "--checkpoint", ckpt, "--method", "baseline"],
    ] {
        let o = run(d, &args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let log = std::fs::read_to_string(d.join("unlearn-fim.rounds.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("round,loss,accuracy,wall_time_ms"));
    assert_eq!(log.lines().count(), 6);

    let fim = d.join("unlearn-fim.report.json");
    let base = d.join("unlearn-baseline.report.json");
    let o = run(d, &["compare", fim.to_str().unwrap(), base.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["acc_baseline", "acc_unlearned", "sape", "t_b_ms", "t_u_ms", "speedup_v", "predicted_v", "d_u"] {
        assert!(m[key].is_number(), "missing {key}");
    }

    // a report compared with itself
    let o = run(d, &["compare", base.to_str().unwrap(), base.to_str().unwrap()]);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["sape"], 0.0);
    assert_eq!(m["speedup_v"], 1.0);
    assert_eq!(m["d_u"], 0.0);

    // `baseline` is an alias
    let other = tempfile::tempdir().unwrap();
    let o = run(other.path(), &["baseline", "--config", &cfg, "--checkpoint", ckpt]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = RunReport::read(&base).unwrap().without_timings();
    let b = RunReport::read(&other.path().join("unlearn-baseline.report.json")).unwrap().without_timings();
    assert_eq!(a, b);
}

#[test]
fn mismatched_provenance_is_refused() {
    let (dir, cfg) = setup(CONFIG);
    let d = dir.path();
    assert!(run(d, &["train", "--config", &cfg]).status.success());
    let ckpt = d.join("train.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    assert!(run(d, &["baseline", "--config", &cfg, "--checkpoint", ckpt]).status.success());

    // checkpoint trained on another partition
    let o = run(d, &["--seed-override", "partition=99", "unlearn", "--config", &cfg, "--checkpoint", ckpt]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("config hash"));

    // reports from different deletion seeds
    let other = d.join("other");
    let o = bin()
        .arg("--out-dir")
        .arg(&other)
        .args(["--seed-override", "deletion=5", "baseline", "--config", &cfg, "--checkpoint", ckpt])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let a = d.join("unlearn-baseline.report.json");
    let b = other.join("unlearn-baseline.report.json");
    let o = run(d, &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // tampered dataset hash
    let mut report: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    report["provenance"]["dataset_hash"] = serde_json::json!("00");
    let c = d.join("tampered.json");
    std::fs::write(&c, serde_json::to_string(&report).unwrap()).unwrap();
    let o = run(d, &["compare", c.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_with_one() {
    let (dir, cfg) = setup(r#"{"federation": {"clients": 4, "learning_rate": 0.1}, "optimizer": {"beta2": 1.5}}"#);
    let o = run(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("federation.learning_rate"), "{err}");
    assert!(err.contains("optimizer.beta2"), "{err}");

    let o = run(dir.path(), &["--seed-override", "nonsense=1", "train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infeasible_deletion_names_the_maximum_rate() {
    let config = CONFIG.replace("\"deletion_rate\": 0.02", "\"deletion_rate\": 0.5, \"max_deletion_fraction\": 0.1");
    let (dir, cfg) = setup(&config);
    let d = dir.path();
    assert!(run(d, &["train", "--config", &cfg]).status.success());
    let ckpt = d.join("train.ckpt");
    let o = run(d, &["unlearn", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    // two clients of 150 examples may each lose 15, i.e. 30 of 600
    assert!(stderr(&o).contains("maximum feasible rate is 0.05"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let (dir, cfg) = setup(CONFIG);
    let o = run(dir.path(), &["gradcheck", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 4);
    assert!(models.iter().all(|m| m["max_grad_rel_error"].as_f64().unwrap() < 1e-5));

    let o = run(dir.path(), &["gradcheck", "--config", &cfg, "--inject-gradient-fault", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("worst coordinate 2"), "{}", stderr(&o));
}

#[test]
fn out_dir_defaults_to_environment() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("from-env");
    let o = bin()
        .env("FEDUNLEARN_OUT_DIR", &out)
        .args(["gradcheck", "--config", &cfg])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("gradcheck.json").exists());
}

#[test]
fn threshold_mode_reports_rounds_to_threshold() {
    let config = CONFIG.replace("\"rounds\": 5", "\"rounds\": 50").replace(
        "\"unlearning\"",
        "\"stop\": {\"loss_threshold\": 5.0}, \"unlearning\"",
    );
    let (dir, cfg) = setup(&config);
    let d = dir.path();
    assert!(run(d, &["train", "--config", &cfg]).status.success());
    let ckpt = d.join("train.ckpt");
    assert!(run(d, &["unlearn", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]).status.success());
    let report = RunReport::read(&d.join("unlearn-fim.report.json")).unwrap();
    assert_eq!(report.summary.rounds_to_threshold, Some(1));
    assert_eq!(report.rounds.len(), 1);
}
