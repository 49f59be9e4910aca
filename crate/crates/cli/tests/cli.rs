use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_CONFIG: &str = r#"
seed = 7

[tokenizer]
codebook_size = 16
code_dim = 4
downsample = 8
d_sem = 6
image_size = 16
d_enc = 8
enc_base = 4
dec_base = 4
semdec_width = 8
semdec_layers = 1
semdec_heads = 2
disc_channels = 4
disc_layers = 2
disc_start = 50
restart_dead_codes = true
restart_every = 40

[optimizer]
lr = 0.003
warmup_steps = 10
total_steps = 200

[lm]
layers = 1
width = 16
heads = 2
context = 96
mlp_ratio = 2

[lm_optimizer]
lr = 0.003
warmup_steps = 2
total_steps = 20

[training]
batch_size = 3
lm_batch_size = 4
log_every = 1

[data]
train_manifest = "manifest.jsonl"
"#;

fn sde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sde")).args(args).env("SDE_DETERMINISTIC", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sde(args);
    assert!(
        out.status.success(),
        "sde {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy images plus the tiny config, written into `dir`.
fn toy_data(dir: &Path, count: usize) -> PathBuf {
    ok(&["make-toy-data", "--out", s(dir), "--count", &count.to_string(), "--size", "16", "--seed", "3"]);
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    cfg
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Runs the full pipeline into `root` and returns the artefacts that must reproduce.
fn pipeline(root: &Path) -> (Value, Vec<u8>, Value, Vec<u8>, Vec<u8>) {
    let data = root.join("data");
    let cfg = toy_data(&data, 12);
    let manifest = data.join("manifest.jsonl");
    let run = root.join("run");
    ok(&["train-tokenizer", "--config", s(&cfg), "--out", s(&run), "--steps", "200"]);
    let ckpt = run.join("tokenizer.ckpt");
    let gen = root.join("gen.tok");
    let und = root.join("und.tok");
    ok(&[
        "tokenize",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out-cache",
        s(&gen),
        "--kind",
        "generation",
    ]);
    ok(&[
        "tokenize",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out-cache",
        s(&und),
        "--kind",
        "understanding",
    ]);
    let vlm = root.join("vlm");
    let caches = format!("{},{}", s(&gen), s(&und));
    ok(&[
        "train-vlm",
        "--config",
        s(&cfg),
        "--tokenizer-ckpt",
        s(&ckpt),
        "--caches",
        &caches,
        "--out",
        s(&vlm),
        "--steps",
        "20",
    ]);
    let img = root.join("g.png");
    ok(&[
        "generate",
        "--vlm-ckpt",
        s(&vlm.join("vlm.ckpt")),
        "--tokenizer-ckpt",
        s(&ckpt),
        "--prompt",
        "a red circle",
        "--seed",
        "11",
        "--out-image",
        s(&img),
    ]);
    (
        read_json(&run.join("loss_log.json")),
        std::fs::read(&ckpt).unwrap(),
        read_json(&vlm.join("loss_log.json")),
        std::fs::read(vlm.join("vlm.ckpt")).unwrap(),
        std::fs::read(&img).unwrap(),
    )
}

#[test]
fn deterministic_pipeline_reproduces() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let steps = ra.0["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 200);
    assert_eq!(ra.0["deterministic"], Value::Bool(true));
    assert_eq!(ra.0["steps"], rb.0["steps"], "tokenizer loss logs differ");
    assert!(ra.1 == rb.1, "tokenizer checkpoints differ");
    assert_eq!(ra.2["steps"], rb.2["steps"], "AR loss logs differ");
    assert!(ra.3 == rb.3, "AR checkpoints differ");
    assert!(ra.4 == rb.4, "generated images differ");
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_data(dir.path(), 9);
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    ok(&["train-tokenizer", "--config", s(&cfg), "--out", s(&full), "--steps", "60"]);
    ok(&["train-tokenizer", "--config", s(&cfg), "--out", s(&part), "--steps", "25"]);
    let ckpt = part.join("tokenizer.ckpt");
    let resumed = dir.path().join("resumed");
    ok(&["train-tokenizer", "--config", s(&cfg), "--out", s(&resumed), "--steps", "60", "--resume", s(&ckpt)]);
    let full_log = read_json(&full.join("loss_log.json"));
    let resumed_log = read_json(&resumed.join("loss_log.json"));
    let tail = &full_log["steps"].as_array().unwrap()[25..];
    assert_eq!(resumed_log["steps"].as_array().unwrap()[..], tail[..]);
    assert!(
        std::fs::read(full.join("tokenizer.ckpt")).unwrap() == std::fs::read(resumed.join("tokenizer.ckpt")).unwrap()
    );
}

#[test]
fn evaluation_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_data(dir.path(), 8);
    let manifest = dir.path().join("manifest.jsonl");
    let run = dir.path().join("run");
    ok(&["train-tokenizer", "--config", s(&cfg), "--out", s(&run), "--steps", "5"]);
    let ckpt = run.join("tokenizer.ckpt");
    let meta = read_json(&dir.path().join("run/tokenizer.ckpt.json"));
    assert_eq!(meta["kind"], "tokenizer");

    let report = dir.path().join("eval.json");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report)]);
    let r = read_json(&report);
    for key in ["psnr", "ssim"] {
        assert!(r["reconstruction"][key].is_number(), "{key} missing from {r}");
        assert!(r["random_baseline"][key].is_number());
    }
    assert!(r["codebook"]["perplexity"].as_f64().unwrap() >= 1.0);

    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out-dir", s(&rec)]);
    assert_eq!(std::fs::read_dir(&rec).unwrap().count(), 8);

    let codes = dir.path().join("codes");
    ok(&["inspect-codes", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out-dir", s(&codes), "--top", "3"]);
    let index = read_json(&codes.join("index.json"));
    let listed = index["codes"].as_array().unwrap();
    assert!(!listed.is_empty() && listed.len() <= 3);
    for entry in listed {
        assert!(Path::new(entry["mosaic"].as_str().unwrap()).is_file());
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = sde(&["train-tokenizer", "--config", s(&dir.path().join("absent.toml")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!out.exists(), "config error must not create outputs");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[tokenizer]\ncodebook_size = \"many\"\n").unwrap();
    assert_eq!(sde(&["train-tokenizer", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));

    let cfg = toy_data(dir.path(), 4);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("disc_layers = 2", "disc_layers = 2\nmystery = 1");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(sde(&["train-tokenizer", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));

    let manifest = dir.path().join("manifest.jsonl");
    let absent_ckpt = dir.path().join("nothing.ckpt");
    let io = sde(&["evaluate", "--checkpoint", s(&absent_ckpt), "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(io.status.code(), Some(4));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    std::fs::write(dir.path().join("junk.ckpt.json"), b"{}").unwrap();
    let format = sde(&["evaluate", "--checkpoint", s(&junk), "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(format.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_data(dir.path(), 4);
    let text =
        std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.003\nwarmup_steps = 10", "lr = 1e30\nwarmup_steps = 0");
    std::fs::write(&cfg, text).unwrap();
    let out = sde(&["train-tokenizer", "--config", s(&cfg), "--out", s(&dir.path().join("run")), "--steps", "50"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
