use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sidecar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidecar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sidecar(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let train = |steps: usize| {
        json!({"max_steps": steps, "batch_size": 4, "peak_lr": 1e-3, "log_every": 0, "injection": {"location": 2}})
    };
    let cfg = json!({
        "data": {
            "corpus": {"seed": 3, "vocab_size": 4, "num_voices": 3, "feature_dim": 6,
                       "utterances": {"train": 20, "dev": 8, "test": 8}, "min_tokens": 2, "max_tokens": 3},
            "mixtures": {"train": 12, "dev": 4, "test": 4},
            "protocol": "left"
        },
        "host": {"feature_dim": 6, "model_dim": 16, "encoder_blocks": 4, "attention_heads": 2,
                 "vocab": [], "blank_index": 0, "seed": 1},
        "sidecar": {"num_speakers": 2, "blocks_per_repeat": 2, "repeats": 1, "bottleneck_channels": 8,
                    "hidden_channels": 12, "io_channels": 16, "block_kernel": 3},
        "pretrain": train(3),
        "train": train(4)
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let ckpt = dir.path().join("ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let summary: Value = serde_json::from_str(&ok(&["train", "--config", &config, "--out", ckpt_s])).unwrap();
    assert!(summary["dev"]["wer"].as_f64().unwrap().is_finite());
    for f in ["meta.json", "params.bin", "params.json", "metrics.jsonl", "host_metrics.jsonl", "summary.json"] {
        assert!(ckpt.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["step"], 1);
    assert!(lines[3]["lr"].as_f64().is_some() && lines[3]["loss"].as_f64().is_some());

    let data = dir.path().join("data");
    ok(&["simulate", "--seed", "3", "--protocol", "left", "--out", data.to_str().unwrap(), "--config", &config]);
    let dev = data.join("dev.jsonl");
    let report: Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--checkpoint",
        ckpt_s,
        "--manifest",
        dev.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(report, summary["dev"], "manifest evaluation should match the in-memory dev split");

    let params: Value = serde_json::from_str(&ok(&["params", "--checkpoint", &format!("{ckpt_s}/meta.json")])).unwrap();
    let (t, f) = (params["trainable"].as_u64().unwrap(), params["frozen"].as_u64().unwrap());
    assert!(t > 0 && f > 0);
    assert_eq!(params["host"].as_u64().unwrap(), f);

    let first_id = fs::read_to_string(&dev).unwrap().lines().next().map(|l| {
        serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string()
    });
    let id = first_id.unwrap();
    let plots = dir.path().join("plots");
    ok(&["viz", "--checkpoint", ckpt_s, "--utterance", &id, "--out", plots.to_str().unwrap(), "--png"]);
    assert!(plots.join(format!("{id}.csv")).exists());
    assert!(plots.join(format!("{id}.png")).exists());
    let plots2 = dir.path().join("plots2");
    ok(&[
        "viz",
        "--checkpoint",
        ckpt_s,
        "--utterance",
        &id,
        "--out",
        plots2.to_str().unwrap(),
        "--manifest",
        dev.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(plots.join(format!("{id}.csv"))).unwrap(),
        fs::read(plots2.join(format!("{id}.csv"))).unwrap()
    );

    let missing = sidecar(&["viz", "--checkpoint", ckpt_s, "--utterance", "nope", "--out", plots.to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
}

#[test]
fn simulate_writes_all_splits() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("sim");
    ok(&["simulate", "--seed", "9", "--protocol", "delayed", "--out", out.to_str().unwrap(), "--config", &config]);
    for split in ["train", "dev", "test"] {
        let text = fs::read_to_string(out.join(format!("{split}.jsonl"))).unwrap();
        assert!(!text.is_empty());
        let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["sources"].as_array().unwrap().len(), 2);
        assert!(first["sources"][1]["offset_frames"].as_u64().unwrap() >= 1);
    }
    let data: Value = serde_json::from_slice(&fs::read(out.join("data.json")).unwrap()).unwrap();
    assert_eq!(data["corpus"]["seed"], 9);
    assert_eq!(data["protocol"], "delayed");
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let table = ok(&["ablate", "--locations", "0,1,2,3,4", "--config", &config]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "location,dev_wer,test_wer");
    assert_eq!(lines.len(), 6);
    for (i, l) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells[0], i.to_string());
        assert!(cells[1].parse::<f64>().unwrap().is_finite());
    }

    let out = dir.path().join("recon.csv");
    ok(&["ablate", "--recon", "none,si_snr,mse", "--config", &config, "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(out).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(text.starts_with("recon,dev_wer,test_wer\n"));
    assert_eq!(labels, ["none", "si_snr", "mse"]);

    assert!(!sidecar(&["ablate", "--locations", "1", "--recon", "mse", "--config", &config]).status.success());
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = sidecar(&["simulate", "--seed", "1", "--protocol", "sideways", "--out", dir.path().to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sideways"));

    let missing = sidecar(&["train", "--config", "/nonexistent.json", "--out", dir.path().to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));

    let path = dir.path().join("broken.json");
    fs::write(&path, "{\"data\": 1}").unwrap();
    let broken = sidecar(&["ablate", "--locations", "1", "--config", path.to_str().unwrap()]);
    assert!(!broken.status.success());
}

#[test]
fn shipped_toy_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let cfg = sidecar_core::train::ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(cfg, sidecar_core::train::ExperimentConfig::toy());
}
