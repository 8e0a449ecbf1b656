use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use muser::data::read_matrix;
use muser::training::load_checkpoint;

const TOY: &str = "\
model.embed_dim = 8
model.text_dim = 8
model.spec_dim = 8
model.spec_hidden = 8
model.audio_dim = 8
model.audio_hidden = 8
model.grid = 2
model.frame_feat = 128
model.vocab_size = 64
train.batch_size = 8
train.epochs = 3
";

fn muser(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muser"))
        .args(args)
        .current_dir(dir)
        .env_remove("MUSER_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = muser(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.conf"), TOY).unwrap();
    ok(tmp.path(), &["synth", "--classes", "4", "--per-class", "8", "--seed", "7", "--out", "d"]);
    tmp
}

#[test]
fn synth_counts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--classes", "4", "--per-class", "32", "--seed", "7", "--out", "a"]);
    ok(dir, &["synth", "--classes", "4", "--per-class", "32", "--seed", "7", "--out", "b"]);
    assert_eq!(fs::read_dir(dir.join("a/audio")).unwrap().count(), 128);
    let meta = fs::read(dir.join("a/metadata.jsonl")).unwrap();
    assert_eq!(meta.iter().filter(|&&b| b == b'\n').count(), 128);
    assert_eq!(meta, fs::read(dir.join("b/metadata.jsonl")).unwrap());
    assert_eq!(
        fs::read(dir.join("a/audio/clip_0005.wav")).unwrap(),
        fs::read(dir.join("b/audio/clip_0005.wav")).unwrap()
    );
    let out = muser(dir, &["synth", "--classes", "1", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("c").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = setup();
    let dir = tmp.path();
    assert_eq!(muser(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(muser(dir, &["train", "--data", "d/train.jsonl"]).status.code(), Some(1));
    let out = muser(dir, &["train", "--data", "d/train.jsonl", "--out", "r", "--set", "train.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nope"));
    let out = muser(dir, &["train", "--data", "d/train.jsonl", "--out", "r", "--set", "train.batch_size=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(muser(dir, &["--help"]).status.success());
}

#[test]
fn train_is_deterministic_and_flags_plumb_through() {
    let tmp = setup();
    let dir = tmp.path();
    let base = ["train", "--config", "toy.conf", "--data", "d/train.jsonl", "--seed", "1"];
    ok(dir, &[&base[..], &["--out", "r1"]].concat());
    ok(dir, &[&base[..], &["--out", "r2"]].concat());
    let log = fs::read_to_string(dir.join("r1/train.log")).unwrap();
    assert_eq!(log, fs::read_to_string(dir.join("r2/train.log")).unwrap());
    assert!(log.lines().all(|l| l.split(',').count() == 3));
    assert_eq!(fs::read(dir.join("r1/model.ckpt")).unwrap(), fs::read(dir.join("r2/model.ckpt")).unwrap());

    ok(dir, &[&base[..], &["--out", "ns", "--no-spectrum"]].concat());
    assert!(!load_checkpoint(dir.join("ns/model.ckpt")).unwrap().config.spectrum_enabled);
    assert!(load_checkpoint(dir.join("r1/model.ckpt")).unwrap().config.spectrum_enabled);
}

#[test]
fn seed_precedence() {
    let tmp = setup();
    let dir = tmp.path();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_muser"));
        cmd.args(["train", "--config", "toy.conf", "--data", "d/train.jsonl", "--epochs", "1", "--out", out])
            .args(extra)
            .current_dir(dir)
            .env_remove("MUSER_SEED");
        if let Some(s) = env {
            cmd.env("MUSER_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        load_checkpoint(dir.join(out).join("model.ckpt")).unwrap().config.seed
    };
    assert_eq!(run(None, &[], "s0"), 0);
    assert_eq!(run(Some("42"), &[], "s1"), 42);
    assert_eq!(run(Some("42"), &["--set", "train.seed=5"], "s2"), 5);
    assert_eq!(run(Some("42"), &["--set", "train.seed=5", "--seed", "9"], "s3"), 9);
}

#[test]
fn missing_dataset_leaves_no_checkpoint() {
    let tmp = setup();
    let dir = tmp.path();
    let out = muser(dir, &["train", "--data", "absent.jsonl", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("r").exists());
}

#[test]
fn divergent_training_exits_three() {
    let tmp = setup();
    let dir = tmp.path();
    let out = muser(
        dir,
        &["train", "--config", "toy.conf", "--data", "d/train.jsonl", "--out", "r", "--lr", "1e300", "--epochs", "5"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
    assert!(!dir.join("r/model.ckpt").exists());
}

#[test]
fn resume_and_periodic_checkpoints() {
    let tmp = setup();
    let dir = tmp.path();
    let base = ["train", "--config", "toy.conf", "--data", "d/train.jsonl", "--set", "train.checkpoint_every=1"];
    ok(dir, &[&base[..], &["--out", "full"]].concat());
    assert!(dir.join("full/epoch_0001.ckpt").exists() && dir.join("full/epoch_0002.ckpt").exists());
    ok(dir, &["train", "--data", "d/train.jsonl", "--resume", "full/epoch_0001.ckpt", "--out", "rest"]);
    let full = fs::read_to_string(dir.join("full/train.log")).unwrap();
    let rest = fs::read_to_string(dir.join("rest/train.log")).unwrap();
    assert!(full.ends_with(&rest) && !rest.starts_with("0,"));
    assert_eq!(fs::read(dir.join("full/model.ckpt")).unwrap(), fs::read(dir.join("rest/model.ckpt")).unwrap());
}

#[test]
fn evaluation_commands_print_contract_lines() {
    let tmp = setup();
    let dir = tmp.path();
    ok(dir, &["train", "--config", "toy.conf", "--data", "d/train.jsonl", "--out", "r"]);
    let zs = ok(
        dir,
        &["zeroshot", "--ckpt", "r/model.ckpt", "--data", "d/test.jsonl", "--template", "a song of {genre}"],
    );
    let acc: f64 = zs.lines().find_map(|l| l.strip_prefix("accuracy=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ev = ok(dir, &["eval", "--ckpt", "r/model.ckpt", "--data", "d/test.jsonl", "--task", "tagging", "--json", "r.json"]);
    assert!(ev.lines().any(|l| l.starts_with("roc_auc_macro=")));
    assert!(ev.lines().any(|l| l.starts_with("ap_macro=")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(json["task"], "tagging");

    let ab = ok(dir, &["ablate-templates", "--ckpt", "r/model.ckpt", "--data", "d/test.jsonl"]);
    assert_eq!(ab.lines().count(), 5);
    assert!(ab.lines().nth(1).unwrap().starts_with("No template\t"));

    let fs_out = ok(
        dir,
        &[
            "fewshot", "--config", "toy.conf", "--ckpt", "r/model.ckpt", "--train", "d/train.jsonl", "--test",
            "d/test.jsonl", "--epochs", "1",
        ],
    );
    let lines: Vec<&str> = fs_out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("skipped="));
    assert!(lines[3].starts_with("ratio=1 n_train=24 accuracy="));
}

#[test]
fn stft_writes_readable_matrix() {
    let tmp = setup();
    let dir = tmp.path();
    let out = ok(dir, &["stft", "--in", "d/audio/clip_0000.wav", "--out", "s.mat", "--frame-len", "256", "--hop", "128"]);
    let m = read_matrix(dir.join("s.mat")).unwrap();
    assert_eq!(m.rows(), 129);
    assert!(out.contains(&format!("frames={}", m.cols())));
    let bad = muser(dir, &["stft", "--in", "d/metadata.jsonl", "--out", "x.mat"]);
    assert_eq!(bad.status.code(), Some(2));
}
