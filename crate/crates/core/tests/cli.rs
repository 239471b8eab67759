mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bijou::checkpoint::{Checkpoint, EncoderBundle};
use bijou::data;
use tempfile::TempDir;

fn bijou(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bijou"))
        .args(args)
        .current_dir(dir)
        .env_remove("BIJOU_LOG_DIR")
        .output()
        .expect("spawn bijou")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const CORPUS: &str = "the cat sat on the mat.
a dog ran after the cat.
the mat was red and the dog was brown.
cats and dogs do not always get along.
on sunday the dog slept on the red mat.
";

fn config(data: &str, out_dir: &str, steps: u64) -> String {
    format!(
        "preset = text-base-mlm
prenet.vocab_size = 128
prenet.max_positions = 32
encoder.layers = 1
encoder.heads = 2
encoder.d_model = 16
encoder.d_ff = 32
distill.top_k = 1
decoder.layers = 1
decoder.dim = 16
decoder.kernel = 3
mask.clones = 2
mask.length = 2
lambda.steps = {steps}
ema.anneal_steps = {steps}
optim.warmup_steps = 1
optim.max_steps = {steps}
batch.sequences = 2
train.checkpoint_every = 2
train.data = {data}
train.out_dir = {out_dir}
"
    )
}

fn prepare_text(dir: &Path) {
    fs::write(dir.join("corpus.txt"), CORPUS).unwrap();
    ok(bijou(dir, &["tok-train", "--corpus", "corpus.txt", "--vocab", "80", "--out", "tok"]));
    ok(bijou(dir, &["prep-text", "--corpus", "corpus.txt", "--tokenizer", "tok", "--max-len", "16", "--out", "packed.jsonl"]));
}

#[test]
fn usage_errors_and_help() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&bijou(dir.path(), &[])), 1);
    assert_eq!(code(&bijou(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&bijou(dir.path(), &["--help"])), 0);
    assert_eq!(code(&bijou(dir.path(), &["train", "--help"])), 0);
    // A missing file is a data fault, a bad setting a configuration error.
    assert_eq!(code(&bijou(dir.path(), &["train", "--config", "absent.cfg"])), 2);
    fs::write(dir.path().join("bad.cfg"), "preset = text-base\nencoder.layers = many\n").unwrap();
    assert_eq!(code(&bijou(dir.path(), &["train", "--config", "bad.cfg"])), 1);
    fs::write(dir.path().join("noseed.cfg"), config("packed.jsonl", "run", 2)).unwrap();
    let out = bijou(dir.path(), &["train", "--config", "noseed.cfg", "--deterministic"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--deterministic"));
    assert_eq!(code(&bijou(dir.path(), &["probe", "--bundle", "nothing.bundle", "--task", "bracket-depth"])), 2);
}

#[test]
fn text_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    prepare_text(d);
    assert!(d.join("tok").join("vocab.txt").exists());
    let packed = data::read_packed(&d.join("packed.jsonl")).unwrap();
    assert!(!packed.is_empty() && packed.iter().all(|s| s.ids.len() <= 16));

    fs::write(d.join("run.cfg"), config("packed.jsonl", "run", 4)).unwrap();
    let out = ok(bijou(d, &["train", "--config", "run.cfg", "--seed", "3"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 updates"));
    for f in ["step-00000002.ckpt", "step-00000004.ckpt", "final.ckpt", "metrics.jsonl"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    ok(bijou(d, &["export", "--ckpt", "run/final.ckpt", "--out", "enc.bundle"]));
    let bundle = EncoderBundle::load(&d.join("enc.bundle")).unwrap();
    assert_eq!(bundle.config.model.encoder.d_model, 16);

    let out = ok(bijou(d, &["probe", "--bundle", "enc.bundle", "--task", "bracket-depth", "--seeds", "2", "--epochs", "5"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("random-init") && stdout.contains("mean"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("enc.bundle.bracket-depth.probe.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);

    assert_eq!(code(&bijou(d, &["probe", "--bundle", "enc.bundle", "--task", "tone-class", "--seeds", "1"])), 1);
}

#[test]
fn deterministic_runs_are_byte_stable_and_resume_checks_config() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    prepare_text(d);
    // The checkpoint records its own configuration, so both runs use the
    // same relative paths from sibling directories.
    for run in ["a", "b"] {
        fs::create_dir(d.join(run)).unwrap();
        fs::write(d.join(run).join("run.cfg"), config("../packed.jsonl", "out", 3)).unwrap();
        ok(bijou(&d.join(run), &["train", "--config", "run.cfg", "--seed", "11", "--deterministic"]));
    }
    for f in ["final.ckpt", "metrics.jsonl", "step-00000002.ckpt"] {
        let a = fs::read(d.join("a/out").join(f)).unwrap();
        assert!(a == fs::read(d.join("b/out").join(f)).unwrap(), "{f} differs");
    }

    // Stop early, then finish from the checkpoint with a different out_dir.
    let c = d.join("c");
    fs::create_dir(&c).unwrap();
    fs::write(c.join("run.cfg"), config("../packed.jsonl", "out", 3)).unwrap();
    ok(bijou(&c, &["train", "--config", "run.cfg", "--seed", "11", "--until", "2"]));
    assert_eq!(Checkpoint::load(&c.join("out/final.ckpt")).unwrap().step, 2);
    ok(bijou(&c, &["train", "--config", "run.cfg", "--seed", "11", "--resume", "out/final.ckpt"]));
    assert!(fs::read(d.join("a/out/final.ckpt")).unwrap() == fs::read(c.join("out/final.ckpt")).unwrap());
    assert!(fs::read(d.join("a/out/metrics.jsonl")).unwrap() == fs::read(c.join("out/metrics.jsonl")).unwrap());

    let changed = config("packed.jsonl", "c", 3).replace("mask.length = 2", "mask.length = 3");
    fs::write(d.join("changed.cfg"), changed).unwrap();
    let out = bijou(d, &["train", "--config", "changed.cfg", "--resume", "c/out/step-00000002.ckpt"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prep_audio_writes_a_manifest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let a = common::audio::noise(common::audio::RATE * 8, 0.3, 1);
    let b = common::audio::noise(common::audio::RATE * 5, 0.3, 2);
    common::audio::write(d, "a.wav", &a);
    common::audio::write(d, "b.wav", &b);
    let out = ok(bijou(
        d,
        &["prep-audio", "--wav", "a.wav", "b.wav", "--hours", "1", "--chunk-seconds", "2", "--seed", "4", "--out", "chunks.tsv"],
    ));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ran out"));
    let chunks = data::read_manifest(&d.join("chunks.tsv")).unwrap();
    assert_eq!(chunks.len(), 6);
    assert!(chunks.iter().all(|c| c.duration == 2.0));

    assert_eq!(code(&bijou(d, &["prep-audio", "--out", "x.tsv"])), 1);
    assert_eq!(code(&bijou(d, &["prep-audio", "--wav", "missing.wav", "--out", "x.tsv"])), 2);
}
