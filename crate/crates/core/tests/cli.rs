use std::path::Path;
use std::process::{Command, Output};

use mvfas::backbone::BackboneConfig;
use mvfas::harness::config::{DomainSource, RunConfig};
use mvfas::harness::synth::SynthRecipe;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvfas"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mvfas")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Four tiny synthetic domains and a small model so each command takes a second or two.
fn write_tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::smoke();
    for (i, d) in cfg.domains.iter_mut().enumerate() {
        let mut r = SynthRecipe::preset(i, 6, 6);
        r.image_size = 16;
        d.source = DomainSource::Synthetic(r);
    }
    cfg.model.backbone = BackboneConfig {
        image_size: 16,
        patch_size: 8,
        vision_width: 8,
        vision_depth: 1,
        vision_heads: 2,
        mlp_ratio: 2,
        embed_dim: 8,
        text_width: 8,
        text_depth: 1,
        text_heads: 2,
        text_max_len: 16,
        vocab_size: 64,
        weights: None,
    };
    cfg.model.ctx_len = 2;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 8;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_rejected() {
    let o = run(&["train", "--out", "/nonexistent", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn missing_config_file_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["train", "--config", "/no/such/config.toml", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn synth_train_eval_visualize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    let o = run(&["synth-gen", "--config", &cfg, "--out", data_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with(",syn0")).count(), 12);
    let again = run(&["synth-gen", "--config", &cfg, "--out", data_s]);
    assert!(!again.status.success(), "existing outputs must not be overwritten");
    assert!(stderr(&again).contains("manifest.csv"));

    let gen_cfg = data.join("config.toml");
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", gen_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--target", "syn1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(run_dir.join("history.json")).unwrap()).unwrap();
    assert_eq!(history.len(), 2);

    let ckpt = run_dir.join("checkpoint.safetensors");
    let ev = dir.path().join("eval");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("syn0+syn2+syn3->syn1"), "{table}");
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["scenarios"][0]["metrics"]["auc"].is_number());

    // Re-summarising the written scores gives the same numbers.
    let ev2 = dir.path().join("eval2");
    let o = run(&["eval", "--scores", ev.join("scores.csv").to_str().unwrap(), "--out", ev2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m2: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev2.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["scenarios"][0]["metrics"], m2["scenarios"][0]["metrics"]);

    let img = data.join("syn1/real_0000.png");
    let vis = dir.path().join("vis");
    let o = run(&["visualize", "--checkpoint", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap(), "--out", vis.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["pos0", "pos1", "pos2", "neg0", "neg1", "neg2"] {
        assert!(vis.join(format!("{name}.txt")).exists());
        assert!(vis.join(format!("{name}.png")).exists());
    }
    assert!(vis.join("composite.png").exists());
}

#[test]
fn eval_requires_a_source() {
    let o = run(&["eval", "--out", "/tmp/unused"]);
    assert!(!o.status.success());
}

#[test]
fn invalid_override_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("o");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--target", "nowhere"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    assert!(!out.join("checkpoint.safetensors").exists());
}
