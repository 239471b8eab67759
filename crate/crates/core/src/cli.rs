//! Command-line entry point.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data fault
//! (missing or malformed input, I/O), 3 numeric fault during training.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EncoderBundle};
use crate::config::TrainConfig;
use crate::data::{self, DedupConfig, ManifestEntry};
use crate::error::{Error, Result};
use crate::probe::{self, ProbeConfig};
use crate::tokenizer::{self, TokenizerModel};
use crate::trainer::{self, Dataset, RunPaths, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bijou", version, about = "Masked latent prediction pretraining for text and speech encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE tokenizer on a text corpus (one sentence per line).
    TokTrain(TokTrainArgs),
    /// Tokenize and pack a text corpus into training sequences.
    PrepText(PrepTextArgs),
    /// Deduplicate audio and sample fixed-length chunks into a manifest.
    PrepAudio(PrepAudioArgs),
    /// Pretrain an encoder from a config file.
    Train(TrainArgs),
    /// Extract the pre-net and student encoder from a checkpoint.
    Export(ExportArgs),
    /// Linear-probe a frozen encoder bundle against a random-init baseline.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
struct TokTrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = tokenizer::DEFAULT_VOCAB_SIZE)]
    vocab: usize,
    /// Output directory for the vocabulary and merges files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PrepTextArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer directory written by tok-train.
    #[arg(long)]
    tokenizer: PathBuf,
    /// Maximum tokens per packed sequence.
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PrepAudioArgs {
    /// Input manifest; alternatively list WAV files with --wav.
    #[arg(long, conflicts_with = "wav")]
    manifest: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    wav: Vec<PathBuf>,
    /// Manifest of held-out audio whose content must not leak into the output.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    hours: f64,
    #[arg(long, default_value_t = data::CHUNK_SECONDS)]
    chunk_seconds: f64,
    #[arg(long, default_value_t = data::DEFAULT_HAMMING_MAX)]
    hamming_max: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Refuse to start without a fixed seed. Training is single-threaded,
    /// so a fixed seed makes every output byte-stable.
    #[arg(long)]
    deterministic: bool,
    /// Stop after this update instead of optim.max_steps.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// One of: bracket-depth, token-parity, tone-class.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: u64,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f64,
    /// Results file; defaults to <bundle>.<task>.probe.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the verb and returns the exit
/// status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("bijou: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TokTrain(a) => tok_train(a),
        Command::PrepText(a) => prep_text(a),
        Command::PrepAudio(a) => prep_audio(a),
        Command::Train(a) => train(a),
        Command::Export(a) => export(a),
        Command::Probe(a) => probe(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: not UTF-8: {e}", path.display())))
}

fn tok_train(a: TokTrainArgs) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let model = tokenizer::train_bpe(text.lines(), a.vocab)?;
    model.save(&a.out)?;
    println!("vocab {} ({} merges) -> {}", model.vocab_size(), model.merges().len(), a.out.display());
    if model.vocab_size() < a.vocab {
        eprintln!("bijou: corpus exhausted pair merges below the requested vocabulary of {}", a.vocab);
    }
    Ok(())
}

fn prep_text(a: PrepTextArgs) -> Result<()> {
    let tok = TokenizerModel::load(&a.tokenizer)?;
    let text = read_text(&a.corpus)?;
    let samples = data::pack_text(text.lines().filter(|l| !l.trim().is_empty()), &tok, a.max_len)?;
    data::write_packed(&a.out, &samples)?;
    let truncated = samples.iter().filter(|s| s.truncated).count();
    println!("{} sequences ({truncated} truncated) -> {}", samples.len(), a.out.display());
    Ok(())
}

fn prep_audio(a: PrepAudioArgs) -> Result<()> {
    let corpus = match (&a.manifest, a.wav.is_empty()) {
        (Some(m), _) => data::read_manifest(m)?,
        (None, false) => data::manifest_from_wavs(&a.wav)?,
        (None, true) => return Err(Error::Config("prep-audio needs --manifest or --wav".into())),
    };
    let exclusions: Vec<ManifestEntry> = match &a.exclude {
        Some(p) => data::read_manifest(p)?,
        None => Vec::new(),
    };
    let cfg = DedupConfig { target_hours: a.hours, chunk_seconds: a.chunk_seconds, hamming_max: a.hamming_max };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sampled = data::dedup_and_sample(&corpus, &exclusions, &cfg, &mut rng)?;
    for f in &sampled.faults {
        eprintln!("bijou: skipped {}: {}", f.path.display(), f.message);
    }
    if sampled.chunks.is_empty() && !sampled.faults.is_empty() {
        return Err(Error::Data("no readable audio".into()));
    }
    data::write_manifest(&a.out, &sampled.chunks)?;
    let removed: f64 = sampled
        .excluded
        .iter()
        .flat_map(|(_, r)| r.iter().map(|(s, e)| data::samples_to_seconds(e - s)))
        .sum();
    println!(
        "{} chunks, {:.3} h, {:.1} s removed as duplicate -> {}",
        sampled.chunks.len(),
        sampled.hours(),
        removed,
        a.out.display()
    );
    if sampled.exhausted {
        eprintln!("bijou: eligible audio ran out before {} h", a.hours);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = read_text(&a.config)?;
    let mut cfg = TrainConfig::parse(&text)?;
    if a.deterministic && a.seed.is_none() && !text.lines().any(|l| l.trim_start().starts_with("train.seed")) {
        return Err(Error::Config("--deterministic needs --seed or train.seed".into()));
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut state = match &a.resume {
        None => TrainState::new(cfg.clone())?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            // Paths and cadence may change between runs; the model and its
            // schedules may not.
            let mut expected = ckpt.config.clone();
            expected.data = cfg.data.clone();
            expected.out_dir = cfg.out_dir.clone();
            expected.checkpoint_every = cfg.checkpoint_every;
            expected.prefetch = cfg.prefetch;
            expected.seed = cfg.seed;
            if expected != cfg {
                return Err(Error::Config(format!("{} does not match the checkpoint's configuration", a.config.display())));
            }
            let mut s = TrainState::from_checkpoint(ckpt)?;
            s.config = expected;
            s
        }
    };
    let dataset = Dataset::load(&state.config)?;
    if dataset.skipped > 0 {
        eprintln!("bijou: skipped {} unusable examples", dataset.skipped);
    }
    let paths = RunPaths::from_config(&state.config);
    let summary = trainer::train(&mut state, &dataset, &paths, a.until)?;
    if let Some(last) = summary.records.last() {
        println!("step {} loss {:.6} lr {:.3e} tau {:.6}", last.step, last.loss, last.lr, last.tau);
    }
    println!("{} updates -> {}", summary.steps_run, summary.final_checkpoint.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let bundle = trainer::export_encoder(&ckpt);
    bundle.save(&a.out)?;
    println!("{} encoder tensors -> {}", bundle.params.len(), a.out.display());
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let bundle = EncoderBundle::load(&a.bundle)?;
    let cfg = ProbeConfig { epochs: a.epochs, lr: a.lr };
    let report = probe::compare_with_random_init(&bundle, &a.task, a.seeds, &cfg)?;
    println!("{:>6}  {:>10}  {:>11}", "seed", "pretrained", "random-init");
    for r in &report.rows {
        println!("{:>6}  {:>10.4}  {:>11.4}", r.seed, r.pretrained, r.random_init);
    }
    println!("{:>6}  {:>10.4}  {:>11.4}", "mean", report.pretrained_mean, report.random_init_mean);
    let out = a.out.unwrap_or_else(|| {
        let mut name = a.bundle.clone().into_os_string();
        name.push(format!(".{}.probe.json", a.task));
        PathBuf::from(name)
    });
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&out, json + "\n").map_err(|e| Error::io(&out, e))?;
    println!("results -> {}", out.display());
    Ok(())
}
