//! Linear probes on frozen encoder features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::EncoderBundle;
use crate::encoder::{self, EncoderMode};
use crate::error::{Error, Result};
use crate::optim::{self, AdamState, OptimConfig};
use crate::params::{Binder, Init, ParamSet};
use crate::prenet::{self, Example, Modality, PrenetConfig, SAMPLE_RATE};
use crate::synthetic;
use crate::tensor::{self, Tensor};

pub const TASKS: [&str; 3] = ["bracket-depth", "token-parity", "tone-class"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    /// One label per frame.
    Token,
    /// One label per example, predicted from mean-pooled frames.
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub input: Example,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub kind: TaskKind,
    pub classes: usize,
    pub train: Vec<ProbeExample>,
    pub eval: Vec<ProbeExample>,
}

impl ProbeTask {
    pub fn modality(&self) -> Option<Modality> {
        self.train.first().map(|e| match e.input {
            Example::Text(_) => Modality::Text,
            Example::Speech(_) => Modality::Speech,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("a probe task needs at least one class".into()));
        }
        if self.train.is_empty() || self.eval.is_empty() {
            return Err(Error::Input(format!("task {} needs train and eval examples", self.name)));
        }
        for e in self.train.iter().chain(&self.eval) {
            if e.labels.iter().any(|&l| l >= self.classes) {
                return Err(Error::Input(format!("task {}: label outside 0..{}", self.name, self.classes)));
            }
            if self.kind == TaskKind::Sequence && e.labels.len() != 1 {
                return Err(Error::Input(format!("task {}: sequence examples carry one label", self.name)));
            }
        }
        if let Some(i) = self.eval.iter().position(|e| self.train.iter().any(|t| t.input == e.input)) {
            return Err(Error::Input(format!("task {}: eval example {i} also appears in train", self.name)));
        }
        Ok(())
    }
}

/// Builds a named synthetic task; `seed` fixes the data.
pub fn builtin_task(name: &str, seed: u64) -> Result<ProbeTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kind, classes, n_train, n_eval) = match name {
        "bracket-depth" => (TaskKind::Token, 4, 200, 100),
        "token-parity" => (TaskKind::Token, 2, 200, 100),
        "tone-class" => (TaskKind::Sequence, 4, 48, 24),
        _ => return Err(Error::Config(format!("unknown probe task {name:?}; expected one of {}", TASKS.join(", ")))),
    };
    let bigram = synthetic::BigramModel::new(11, 2, 0.9);
    if name == "bracket-depth" {
        return Ok(bracket_task(seed, &BracketSpec::default(), classes, n_train, n_eval));
    }
    let make = |rng: &mut ChaCha8Rng| -> ProbeExample {
        match name {
            "token-parity" => {
                let seq = bigram.sample(32, rng);
                let labels = seq.iter().map(|t| t % 2).collect();
                ProbeExample { input: Example::Text(seq), labels }
            }
            _ => {
                let class = rng.random_range(0..classes);
                let wave = synthetic::tone_clip(class, SAMPLE_RATE as usize / 2, 0.05, rng);
                ProbeExample { input: Example::Speech(wave), labels: vec![class] }
            }
        }
    };
    let train = (0..n_train).map(|_| make(&mut rng)).collect();
    let eval = (0..n_eval).map(|_| make(&mut rng)).collect();
    Ok(ProbeTask { name: name.to_string(), kind, classes, train, eval })
}

/// Shape of the bracket-depth corpus, shared by probing and the toy
/// pretraining run that precedes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BracketSpec {
    pub len: usize,
    pub max_depth: usize,
    pub filler_rate: f64,
    pub tag_prob: f64,
}

impl Default for BracketSpec {
    fn default() -> Self {
        Self { len: BRACKET_LEN, max_depth: BRACKET_MAX_DEPTH, filler_rate: 0.5, tag_prob: 0.8 }
    }
}

impl BracketSpec {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        synthetic::tagged_bracket_sequence(self.len, self.max_depth, self.filler_rate, self.tag_prob, rng)
    }

    pub fn corpus<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// Bracket strings with depth-tagged fillers, labelled with the clipped
/// nesting depth after every token.
pub fn bracket_task(seed: u64, spec: &BracketSpec, classes: usize, n_train: usize, n_eval: usize) -> ProbeTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = || {
        let seq = spec.sample(&mut rng);
        let labels = synthetic::bracket_depths(&seq, classes);
        ProbeExample { input: Example::Text(seq), labels }
    };
    let train = (0..n_train).map(|_| make()).collect();
    let eval = (0..n_eval).map(|_| make()).collect();
    ProbeTask { name: "bracket-depth".into(), kind: TaskKind::Token, classes, train, eval }
}

pub const BRACKET_LEN: usize = 32;
pub const BRACKET_MAX_DEPTH: usize = 3;

/// Final encoder output `[T × d]` of one example with every layer active
/// and no graph recorded.
pub fn encode_frozen(bundle: &EncoderBundle, example: &Example) -> Result<Tensor> {
    let _guard = tensor::no_grad();
    let binder = Binder::new(&bundle.params, false);
    let model = bundle.model();
    let feats = prenet::featurize(example, &model.prenet, &binder)?;
    let plan = vec![true; model.encoder.layers];
    Ok(encoder::encode_with_plan(&feats.frames, &model.encoder, &binder, EncoderMode::Teacher, false, &plan)?.output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch Adam updates.
    pub epochs: u64,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub head: ParamSet,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Rows fed to the head plus their labels.
fn design(bundle: &EncoderBundle, task: &ProbeTask, split: &[ProbeExample]) -> Result<(Tensor, Vec<usize>)> {
    let d = bundle.model().encoder.d_model;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for ex in split {
        let out = encode_frozen(bundle, &ex.input)?;
        let t = out.shape()[0];
        match task.kind {
            TaskKind::Token => {
                if ex.labels.len() != t {
                    return Err(Error::Input(format!(
                        "task {}: {} labels for {t} frames",
                        task.name,
                        ex.labels.len()
                    )));
                }
                rows.extend_from_slice(out.data());
                labels.extend_from_slice(&ex.labels);
            }
            TaskKind::Sequence => {
                let mut mean = vec![0.0; d];
                for row in out.data().chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / t as f64);
                }
                rows.extend(mean);
                labels.push(ex.labels[0]);
            }
        }
    }
    Ok((Tensor::new(&[labels.len(), d], rows)?, labels))
}

fn logits(head: &Binder, x: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&head.get("probe.weight")?)?.add_row(&head.get("probe.bias")?)?)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(head: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let w = head.get("probe.weight").ok_or_else(|| Error::Contract("head lacks probe.weight".into()))?;
    if w.shape[0] != x.shape()[1] {
        return Err(Error::Config(format!(
            "probe head expects width {}, features have width {}",
            w.shape[0],
            x.shape()[1]
        )));
    }
    let _guard = tensor::no_grad();
    let out = logits(&Binder::new(head, false), x)?;
    let c = out.shape()[1];
    let hits = out
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Trains one affine head with cross-entropy and Adam on frozen features;
/// the bundle is only read.
pub fn fit_probe<R: Rng>(
    bundle: &EncoderBundle,
    task: &ProbeTask,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeResult> {
    task.validate()?;
    if task.modality() != Some(bundle.model().modality()) {
        return Err(Error::Config(format!(
            "task {} needs a {} encoder, the bundle is {}",
            task.name,
            task.modality().map_or("?".to_string(), |m| m.to_string()),
            bundle.model().modality()
        )));
    }
    if let PrenetConfig::Text(t) = &bundle.model().prenet {
        let max_id = task.train.iter().chain(&task.eval).filter_map(|e| match &e.input {
            Example::Text(ids) => ids.iter().max().copied(),
            Example::Speech(_) => None,
        });
        if let Some(m) = max_id.max() {
            if m >= t.vocab_size {
                return Err(Error::Config(format!("task uses id {m}, the bundle vocabulary has {}", t.vocab_size)));
            }
        }
    }
    let (x_train, y_train) = design(bundle, task, &task.train)?;
    let (x_eval, y_eval) = design(bundle, task, &task.eval)?;
    let d = x_train.shape()[1];
    let mut head = ParamSet::new();
    let mut init = Init { rng };
    head.insert("probe.weight", &[d, task.classes], init.normal(d * task.classes, 0.01), false)?;
    head.insert("probe.bias", &[task.classes], vec![0.0; task.classes], false)?;
    let opt = OptimConfig {
        lr_min: cfg.lr,
        lr_max: cfg.lr,
        warmup_steps: 0,
        max_steps: u64::MAX,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        clip_norm: None,
    };
    let mut state = AdamState::zeros(&head);
    for step in 1..=cfg.epochs {
        let grads = {
            let binder = Binder::new(&head, true);
            let loss = logits(&binder, &x_train)?.cross_entropy(&y_train)?;
            loss.backward()?;
            binder.grads()
        };
        optim::adam_step(&mut head, &grads, &mut state, step, &opt)?;
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(&head, &x_train, &y_train)?,
        eval_accuracy: accuracy(&head, &x_eval, &y_eval)?,
        head,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub pretrained: f64,
    pub random_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub task: String,
    pub kind: TaskKind,
    pub rows: Vec<SeedRow>,
    pub pretrained_mean: f64,
    pub random_init_mean: f64,
}

/// Probes `bundle` and a same-shaped randomly initialized encoder over
/// `seeds` seeds. Seed `s` fixes the task data, the head init and the
/// random encoder.
pub fn compare_with_random_init(bundle: &EncoderBundle, task_name: &str, seeds: u64, cfg: &ProbeConfig) -> Result<ProbeReport> {
    builtin_task(task_name, 0)?;
    compare_on(bundle, task_name, |seed| builtin_task(task_name, 1000 + seed), seeds, cfg)
}

/// [`compare_with_random_init`] on tasks built by `make_task(seed)`.
pub fn compare_on<F>(bundle: &EncoderBundle, task_name: &str, make_task: F, seeds: u64, cfg: &ProbeConfig) -> Result<ProbeReport>
where
    F: Fn(u64) -> Result<ProbeTask>,
{
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    let mut kind = TaskKind::Token;
    for seed in 0..seeds {
        let task = make_task(seed)?;
        kind = task.kind;
        let random = random_bundle(bundle, seed)?;
        let pre = fit_probe(bundle, &task, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let base = fit_probe(&random, &task, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        rows.push(SeedRow { seed, pretrained: pre.eval_accuracy, random_init: base.eval_accuracy });
    }
    let n = rows.len() as f64;
    Ok(ProbeReport {
        task: task_name.to_string(),
        kind,
        pretrained_mean: rows.iter().map(|r| r.pretrained).sum::<f64>() / n,
        random_init_mean: rows.iter().map(|r| r.random_init).sum::<f64>() / n,
        rows,
    })
}

/// Fresh pre-net and encoder with the bundle's shapes.
pub fn random_bundle(like: &EncoderBundle, seed: u64) -> Result<EncoderBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
    let model = like.model();
    let mut params = ParamSet::new();
    model.prenet.init(model.encoder.d_model, &mut params, &mut rng)?;
    model.encoder.init(&mut params, &mut rng)?;
    Ok(EncoderBundle { config: like.config.clone(), params })
}
