//! Pretraining loop, metrics log, checkpoints and encoder export.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EncoderBundle};
use crate::config::TrainConfig;
use crate::data;
use crate::distiller::{self, Objective, TeacherState};
use crate::error::{Error, Result};
use crate::optim::{self, AdamState};
use crate::params::Binder;
use crate::prenet::{self, Example, Modality, PrenetConfig};

pub const LOG_DIR_ENV: &str = "BIJOU_LOG_DIR";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub l2: f64,
    pub mlm: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub target_std: f64,
    pub target_raw_std: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub teacher_forwards: usize,
    pub examples: usize,
}

/// Training examples held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Entries dropped while loading (unreadable, too short, out of range).
    pub skipped: usize,
}

impl Dataset {
    /// Keeps the examples the model can consume and counts the rest.
    pub fn from_examples(examples: Vec<Example>, cfg: &TrainConfig) -> Result<Self> {
        let total = examples.len();
        let kept: Vec<Example> = examples.into_iter().filter(|e| usable(e, cfg)).collect();
        let skipped = total - kept.len();
        if kept.is_empty() {
            return Err(Error::Data(format!("no usable training examples ({skipped} skipped)")));
        }
        Ok(Self { examples: kept, skipped })
    }

    pub fn from_token_sequences(seqs: Vec<Vec<usize>>, cfg: &TrainConfig) -> Result<Self> {
        Self::from_examples(seqs.into_iter().map(Example::Text).collect(), cfg)
    }

    /// Reads `cfg.data`: a packed text corpus or an audio manifest.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match cfg.modality() {
            Modality::Text => {
                let (samples, bad) = data::read_packed_lenient(&cfg.data)?;
                let mut ds = Self::from_token_sequences(samples.into_iter().map(|s| s.ids).collect(), cfg)?;
                ds.skipped += bad;
                Ok(ds)
            }
            Modality::Speech => {
                let entries = data::read_manifest(&cfg.data)?;
                let mut bad = 0;
                let mut examples = Vec::with_capacity(entries.len());
                for e in &entries {
                    match data::load_entry(e) {
                        Ok(w) => examples.push(Example::Speech(w)),
                        Err(_) => bad += 1,
                    }
                }
                let mut ds = Self::from_examples(examples, cfg)?;
                ds.skipped += bad;
                Ok(ds)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn usable(example: &Example, cfg: &TrainConfig) -> bool {
    match (example, &cfg.model.prenet) {
        (Example::Text(ids), PrenetConfig::Text(t)) => {
            ids.len() >= 2 && ids.len() <= t.max_positions && ids.iter().all(|&i| i < t.vocab_size)
        }
        (Example::Speech(w), PrenetConfig::Speech(_)) => {
            prenet::audio_frame_count(w.len()).is_some_and(|frames| frames >= 2)
        }
        _ => false,
    }
}

/// Mutable training state; converts to and from [`Checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub student: crate::params::ParamSet,
    pub teacher: TeacherState,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = distiller::init_student(&config.model, &config.distill, &mut rng)?;
        let teacher = TeacherState::from_student(&student, config.ema);
        let adam = AdamState::zeros(&student);
        Ok(Self { config, step: 0, student, teacher, adam, rng })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            student: self.student.clone(),
            teacher: self.teacher.shadow.clone(),
            tau: self.teacher.decay,
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let teacher = TeacherState { shadow: ckpt.teacher, schedule: ckpt.config.ema, decay: ckpt.tau };
        Ok(Self {
            config: ckpt.config,
            step: ckpt.step,
            student: ckpt.student,
            teacher,
            adam: ckpt.adam,
            rng: ckpt.rng,
        })
    }

    /// Draws the example indices of the next batch from the training rng.
    fn draw_batch(&mut self, dataset: &Dataset) -> Vec<usize> {
        let n = dataset.len();
        match self.config.modality() {
            Modality::Text => (0..self.config.batch_sequences).map(|_| self.rng.random_range(0..n)).collect(),
            Modality::Speech => {
                let budget = (self.config.batch_seconds * f64::from(prenet::SAMPLE_RATE)).round() as usize;
                let mut out = Vec::new();
                let mut used = 0;
                loop {
                    let i = self.rng.random_range(0..n);
                    let Example::Speech(w) = &dataset.examples[i] else { unreachable!("speech dataset") };
                    if !out.is_empty() && used + w.len() > budget {
                        break;
                    }
                    used += w.len();
                    out.push(i);
                    if used >= budget {
                        break;
                    }
                }
                out
            }
        }
    }

    /// One optimizer update: batch, loss, backward, clip, Adam, EMA. On
    /// error the state, rng included, is left as it was.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let rng = self.rng.clone();
        let result = self.try_step(dataset);
        if result.is_err() {
            self.rng = rng;
        }
        result
    }

    fn try_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let u = self.step + 1;
        let idx = self.draw_batch(dataset);
        let batch: Vec<&Example> = idx.iter().map(|&i| &dataset.examples[i]).collect();
        let objective = Objective { model: &self.config.model, mask: &self.config.mask, distill: &self.config.distill };
        let (mut grads, diag) = {
            let student = Binder::new(&self.student, true);
            let teacher = Binder::new(&self.teacher.shadow, false);
            let (loss, diag) = distiller::pretrain_batch_loss(&batch, &student, &teacher, objective, u, &mut self.rng)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {} at step {u}", loss.item())));
            }
            loss.backward()?;
            (student.grads(), diag)
        };
        let grad_norm = optim::global_norm(&grads);
        let clip_scale = optim::clip_gradients(&mut grads, self.config.optim.clip_norm);
        let lr = optim::adam_step(&mut self.student, &grads, &mut self.adam, u, &self.config.optim)?;
        let tau = self.teacher.update(&self.student, u)?;
        self.step = u;
        Ok(StepRecord {
            step: u,
            loss: diag.loss,
            l2: diag.l2,
            mlm: diag.mlm,
            lambda: diag.lambda,
            lr,
            tau,
            target_std: diag.target_std,
            target_raw_std: diag.target_raw_std,
            grad_norm,
            clip_scale,
            teacher_forwards: diag.teacher_forwards,
            examples: diag.examples,
        })
    }
}

/// Where checkpoints and metrics go.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub checkpoints: PathBuf,
    pub log_dir: PathBuf,
}

impl RunPaths {
    /// Checkpoints under `out_dir`; metrics there too unless
    /// `BIJOU_LOG_DIR` is set.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let log_dir = std::env::var_os(LOG_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.clone());
        Self { checkpoints: cfg.out_dir.clone(), log_dir }
    }

    pub fn metrics(&self) -> PathBuf {
        self.log_dir.join(METRICS_FILE)
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints.join(format!("step-{step:08}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints.join(FINAL_CHECKPOINT)
    }

    pub fn fault_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints.join(format!("fault-{step:08}.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Runs updates until `until` (default `optim.max_steps`), appending one
/// metrics record per update and writing checkpoints at the configured
/// cadence and at the end. A non-finite loss or gradient saves the
/// unchanged parameters as a fault checkpoint and returns
/// [`Error::Numeric`].
pub fn train(state: &mut TrainState, dataset: &Dataset, paths: &RunPaths, until: Option<u64>) -> Result<TrainSummary> {
    let until = until.unwrap_or(state.config.optim.max_steps);
    fs::create_dir_all(&paths.log_dir).map_err(|e| Error::io(&paths.log_dir, e))?;
    let metrics_path = paths.metrics();
    let file: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut records = Vec::new();
    let start = state.step;
    while state.step < until {
        let record = match state.step(dataset) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                // Parameters and moments are untouched by a failed update.
                log.flush().map_err(|err| Error::io(&metrics_path, err))?;
                state.checkpoint().save(&paths.fault_checkpoint(state.step + 1))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        records.push(record);
        let every = state.config.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            state.checkpoint().save(&paths.step_checkpoint(state.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = paths.final_checkpoint();
    state.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary { steps_run: state.step - start, final_step: state.step, final_checkpoint, records })
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Pre-net plus student encoder of a checkpoint.
pub fn export_encoder(ckpt: &Checkpoint) -> EncoderBundle {
    EncoderBundle::from_checkpoint(ckpt)
}
