use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "env": { "name": "catch", "width": 4, "height": 5 },
  "model": { "kind": "adaptive", "d_model": 16, "n_heads": 2, "d_head": 8, "d_ff": 16, "mem_len": 8, "ramp": 2, "conv_channels": 2 },
  "pipeline": { "n_actors": 2, "n_buffers": 2, "unroll_length": 8, "mini_batch": 4, "batch_size": 2 },
  "total_steps": 5,
  "eval_episodes": 4,
  "sweep": { "key": "span_penalty", "values": [0.0, 0.1] }
}
"#;

fn adaspan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaspan"))
        .args(args)
        .env("ADASPAN_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn train_report_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.display().to_string();

    ok(&adaspan(&["train", "--config", &cfg, "--seed", "3", "--deterministic", "--out", &run_s]));
    for f in ["config.json", "metrics.jsonl", "summary.json", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 5);

    ok(&adaspan(&["report", &run_s]));
    let returns = std::fs::read_to_string(run.join("returns.csv")).unwrap();
    assert_eq!(returns.lines().count(), 6);
    let spans = std::fs::read_to_string(run.join("spans.csv")).unwrap();
    assert!(spans.starts_with("step,layer0_head0,layer0_head1"));
    assert!(run.join("flops.csv").exists());

    let ck = run.join("final.ckpt").display().to_string();
    let eval_dir = dir.path().join("eval").display().to_string();
    let out = adaspan(&["eval", "--checkpoint", &ck, "--out", &eval_dir]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("greedy"));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["n_episodes"], 100);
}

#[test]
fn deterministic_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name).display().to_string();
        ok(&adaspan(&["train", "--config", &cfg, "--deterministic", "--out", &out]));
        files.push(std::fs::read(dir.path().join(name).join("metrics.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn resume_from_checkpoint_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run").display().to_string();
    ok(&adaspan(&["train", "--config", &cfg, "--deterministic", "--out", &run]));
    let ck = dir.path().join("run/checkpoints/step_00000003.ckpt");
    assert!(ck.exists());
    let resumed = dir.path().join("resumed").display().to_string();
    ok(&adaspan(&[
        "train",
        "--config",
        &cfg,
        "--deterministic",
        "--checkpoint",
        &ck.display().to_string(),
        "--out",
        &resumed,
    ]));
    let text = std::fs::read_to_string(dir.path().join("resumed/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![4, 5]);
}

#[test]
fn sweep_runs_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let root = dir.path().join("sweep");
    ok(&adaspan(&["sweep", "--config", &cfg, "--deterministic", "--out", &root.display().to_string()]));
    assert!(root.join("span_penalty_0/metrics.jsonl").exists());
    assert!(root.join("span_penalty_0.1/metrics.jsonl").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_reports_flop_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("bench");
    ok(&adaspan(&[
        "bench",
        "--config",
        &cfg,
        "--spans",
        "2",
        "--reps",
        "1",
        "--out",
        &out.display().to_string(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    // span 2, ramp 2: window 4 of 8
    assert_eq!(report["flops"]["ratio"], 0.5);
}

#[test]
fn bad_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"total_steps\": 10,\n  \"model\": { \"n_heads\": 3 }\n}\n").unwrap();
    let out = adaspan(&["train", "--config", &p.display().to_string()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn eval_without_checkpoint_fails() {
    let out = adaspan(&["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}
