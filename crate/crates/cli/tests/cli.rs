use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hcprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcprune")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hcprune(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
n_layers = 2
d_hidden = 8
n_heads = 2
d_head = 4
d_ffn = 16
seq_len = 6
input_dim = 3
total_steps = 40
batch_size = 2
pairing_refresh = 10
"#;

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_compact_bench_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["train-prune", &cfg, "--out", run_s, "--every", "0", "--set", "ste=\"coarse_only\""])).unwrap();
    assert_eq!(summary["steps"], 40);
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("ste = \"coarse_only\""));
    assert!(resolved.contains("total_steps = 40"));

    let ckpt = run.join("model.ckpt");
    let report: serde_json::Value = serde_json::from_str(&ok(&["compact", ckpt.to_str().unwrap()])).unwrap();
    assert!(report["params"].as_u64().unwrap() <= report["dense_params"].as_u64().unwrap());
    assert!(run.join("compact.ckpt").exists());

    let bench: serde_json::Value = serde_json::from_str(&ok(&[
        "bench",
        run.join("compact.ckpt").to_str().unwrap(),
        "--dense",
        run.join("teacher.ckpt").to_str().unwrap(),
        "--batch",
        "256",
        "--repeats",
        "5",
    ]))
    .unwrap();
    assert_eq!(bench[0]["label"], "dense");
    assert!(bench[1]["speedup"].as_f64().unwrap() > 0.0);

    ok(&["export-fig", run_s, "traj"]);
    let traj = fs::read_to_string(run.join("gate_trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 41);
    ok(&["export-fig", run.join("train_log.jsonl").to_str().unwrap(), "heatmap"]);
    assert_eq!(fs::read_to_string(run.join("remaining_fractions.csv")).unwrap().lines().count(), 3);
    assert!(run.join("wv_keep_layer1.csv").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train-prune", &cfg, "--out", a.to_str().unwrap(), "--every", "0"]);
    ok(&["train-prune", &cfg, "--out", b.to_str().unwrap(), "--every", "0"]);
    for f in ["train_log.jsonl", "model.ckpt", "pairing_log.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_config_and_overrides_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = hcprune(&["train-prune", &cfg, "--set", "warmup_fraction=0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup_fraction"));
    assert!(!hcprune(&["train-prune", &cfg, "--set", "nonsense"]).status.success());
    assert!(!hcprune(&["train-prune", "/no/such/file.toml"]).status.success());
}

#[test]
fn score_command() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.json");
    fs::write(&p, r#"{"er": {"u": 0.9, "sota": 0.9, "fbank": 0.5, "direction": "higher"},
                     "asr": {"u": 23.2, "sota": 3.6, "fbank": 23.2, "direction": "lower"}}"#)
    .unwrap();
    let r: serde_json::Value = serde_json::from_str(&ok(&["score", p.to_str().unwrap()])).unwrap();
    assert_eq!(r["score"], 500.0);
    fs::write(&p, r#"{"er": {"u": 1, "sota": 2, "fbank": 2, "direction": "higher"}}"#).unwrap();
    assert!(!hcprune(&["score", p.to_str().unwrap()]).status.success());
}

#[test]
fn gate_sim_prints_csv() {
    let csv = ok(&["gate-sim", "--log-alpha", "-1", "--log-alpha", "2", "--samples", "2000"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "log_alpha,p_zero,p_one,mean_z,det_z");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("-1,"));
    assert!(!hcprune(&["gate-sim", "--gamma", "0.2"]).status.success());
}
