//! Training configuration: named presets plus flat `key = value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distiller::{DistillConfig, EmaSchedule, LambdaSchedule, ModelConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::optim::OptimConfig;
use crate::prenet::{Modality, PrenetConfig, SpeechPrenetConfig, TextPrenetConfig};
use crate::tokenizer::DEFAULT_VOCAB_SIZE;

pub const PRESETS: [&str; 7] = [
    "speech-base",
    "speech-large",
    "speech-large-114k",
    "text-base",
    "text-base-mlm",
    "text-base-osc-mlm",
    "text-base-crs-mlm",
];

pub const DEFAULT_PREFETCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub mask: MaskSpec,
    pub distill: DistillConfig,
    pub ema: EmaSchedule,
    pub optim: OptimConfig,
    /// Sequences per batch (text).
    pub batch_sequences: usize,
    /// Audio seconds per batch (speech).
    pub batch_seconds: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Packed text corpus or audio manifest.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    /// Prefetch queue capacity in batches.
    pub prefetch: usize,
}

fn text_prenet() -> PrenetConfig {
    PrenetConfig::Text(TextPrenetConfig { vocab_size: DEFAULT_VOCAB_SIZE, max_positions: 512 })
}

fn ema(start: f64, end: f64, anneal_steps: u64) -> EmaSchedule {
    EmaSchedule { start, end, anneal_steps }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let speech = |encoder: EncoderConfig, distill: DistillConfig, mask: MaskSpec| TrainConfig {
            preset: name.to_string(),
            model: ModelConfig { prenet: PrenetConfig::Speech(SpeechPrenetConfig::default()), encoder },
            mask,
            distill,
            ema: ema(0.999, 0.99999, 75_000),
            optim: OptimConfig::new(7.5e-4, 8_000, 400_000, None),
            batch_sequences: 1,
            batch_seconds: 62.5,
            seed: 0,
            checkpoint_every: 0,
            data: PathBuf::new(),
            out_dir: PathBuf::from("checkpoints"),
            prefetch: DEFAULT_PREFETCH,
        };
        let text = |distill: DistillConfig| TrainConfig {
            preset: name.to_string(),
            model: ModelConfig { prenet: text_prenet(), encoder: EncoderConfig::base() },
            mask: MaskSpec::text(),
            distill,
            ema: ema(0.9995, 0.99995, 125_000),
            optim: OptimConfig::new(5e-4, 8_000, 250_000, Some(1.0)),
            batch_sequences: 32,
            batch_seconds: 0.0,
            seed: 0,
            checkpoint_every: 0,
            data: PathBuf::new(),
            out_dir: PathBuf::from("checkpoints"),
            prefetch: DEFAULT_PREFETCH,
        };
        let no_mlm = DistillConfig { lambda: None, ..DistillConfig::text_mlm() };
        let cfg = match name {
            "speech-base" => {
                let mut enc = EncoderConfig::base();
                enc.layerdrop = 0.05;
                speech(enc, DistillConfig::speech_base(), MaskSpec::speech_base())
            }
            "speech-large" | "speech-large-114k" => {
                let mut c = speech(EncoderConfig::large(), DistillConfig::speech_large(), MaskSpec::speech_large());
                if name == "speech-large" {
                    c.optim = OptimConfig::new(4e-4, 5_000, 300_000, Some(1.0));
                    c.ema = ema(0.9997, 1.0, 300_000);
                    c.batch_seconds = 40.0;
                } else {
                    c.optim = OptimConfig::new(2e-4, 20_000, 1_000_000, Some(1.0));
                    c.ema = ema(0.9997, 1.0, 600_000);
                }
                c
            }
            "text-base" => {
                let mut c = text(no_mlm);
                c.optim = OptimConfig::new(2e-4, 4_000, 500_000, Some(1.0));
                c.ema = ema(0.9999, 0.99999, 100_000);
                c.batch_sequences = 4;
                c
            }
            "text-base-mlm" => text(DistillConfig::text_mlm()),
            "text-base-osc-mlm" | "text-base-crs-mlm" => {
                let mut distill = DistillConfig::text_mlm();
                distill.lambda = Some(LambdaSchedule { start: 20.0, end: 2.0, steps: 400_000 });
                let mut c = text(distill);
                c.optim = OptimConfig::new(5e-4, 16_000, 400_000, Some(1.0));
                c.ema = ema(0.9995, 0.99995, 200_000);
                c.batch_sequences = 28;
                c
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn modality(&self) -> Modality {
        self.model.modality()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.distill.validate(&self.model.encoder, self.modality())?;
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.ema.start) || !(0.0..=1.0).contains(&self.ema.end) {
            return Err(Error::Config("EMA decays must lie in [0, 1]".into()));
        }
        match self.modality() {
            Modality::Text if self.batch_sequences == 0 => {
                Err(Error::Config("batch.sequences must be positive".into()))
            }
            Modality::Speech if self.batch_seconds <= 0.0 => {
                Err(Error::Config("batch.seconds must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Parses a document whose first setting is `preset = <name>`; every
    /// later line overrides one field. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(doc: &str) -> Result<Self> {
        let mut cfg: Option<TrainConfig> = None;
        for (n, raw) in doc.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            match (&mut cfg, key) {
                (None, "preset") => cfg = Some(TrainConfig::preset(value)?),
                (None, _) => {
                    return Err(Error::Config(format!("line {}: the first setting must be preset", n + 1)))
                }
                (Some(_), "preset") => {
                    return Err(Error::Config(format!("line {}: preset given twice", n + 1)))
                }
                (Some(c), _) => c.set(key, value).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?,
            }
        }
        let cfg = cfg.ok_or_else(|| Error::Config("configuration names no preset".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&doc)
    }

    /// Applies one override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let text_only = |key: &str| Error::Config(format!("{key} applies to text models only"));
        let speech_only = |key: &str| Error::Config(format!("{key} applies to speech models only"));
        match key {
            "modality" => {
                let m: Modality = value.parse()?;
                if m != self.modality() {
                    return Err(Error::Config(format!(
                        "modality {m} conflicts with preset {} ({})",
                        self.preset,
                        self.modality()
                    )));
                }
            }
            "prenet.vocab_size" | "prenet.max_positions" => {
                let PrenetConfig::Text(t) = &mut self.model.prenet else {
                    return Err(text_only(key));
                };
                if key == "prenet.vocab_size" {
                    t.vocab_size = num(key, value)?;
                } else {
                    t.max_positions = num(key, value)?;
                }
            }
            "prenet.conv_channels" | "prenet.pos_conv_kernel" | "prenet.pos_conv_groups" | "prenet.standardize" => {
                let PrenetConfig::Speech(s) = &mut self.model.prenet else {
                    return Err(speech_only(key));
                };
                match key {
                    "prenet.conv_channels" => s.conv_channels = num(key, value)?,
                    "prenet.pos_conv_kernel" => s.pos_conv_kernel = num(key, value)?,
                    "prenet.pos_conv_groups" => s.pos_conv_groups = num(key, value)?,
                    _ => s.standardize = num(key, value)?,
                }
            }
            "encoder.layers" => self.model.encoder.layers = num(key, value)?,
            "encoder.heads" => self.model.encoder.heads = num(key, value)?,
            "encoder.d_model" => self.model.encoder.d_model = num(key, value)?,
            "encoder.d_ff" => self.model.encoder.d_ff = num(key, value)?,
            "encoder.layerdrop" => self.model.encoder.layerdrop = num(key, value)?,
            "encoder.final_norm" => self.model.encoder.final_norm = num(key, value)?,
            "mask.length" => self.mask.length = num(key, value)?,
            "mask.ratio" => self.mask.ratio = num(key, value)?,
            "mask.adjust" => self.mask.adjust = num(key, value)?,
            "mask.clones" => self.mask.clones = num(key, value)?,
            "distill.top_k" => self.distill.top_k = num(key, value)?,
            "decoder.layers" => self.distill.decoder.layers = num(key, value)?,
            "decoder.dim" => self.distill.decoder.dim = num(key, value)?,
            "decoder.groups" => self.distill.decoder.groups = num(key, value)?,
            "decoder.kernel" => self.distill.decoder.kernel = num(key, value)?,
            "lambda.enabled" => {
                let on: bool = num(key, value)?;
                self.distill.lambda = match (on, self.distill.lambda) {
                    (false, _) => None,
                    (true, Some(l)) => Some(l),
                    (true, None) => Some(LambdaSchedule { start: 20.0, end: 1.0, steps: self.optim.max_steps }),
                };
            }
            "lambda.start" | "lambda.end" | "lambda.steps" => {
                let l = self
                    .distill
                    .lambda
                    .as_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: the MLM term is disabled (set lambda.enabled)")))?;
                match key {
                    "lambda.start" => l.start = num(key, value)?,
                    "lambda.end" => l.end = num(key, value)?,
                    _ => l.steps = num(key, value)?,
                }
            }
            "ema.start" => self.ema.start = num(key, value)?,
            "ema.end" => self.ema.end = num(key, value)?,
            "ema.anneal_steps" => self.ema.anneal_steps = num(key, value)?,
            "optim.lr_min" => self.optim.lr_min = num(key, value)?,
            "optim.lr_max" => self.optim.lr_max = num(key, value)?,
            "optim.warmup_steps" => self.optim.warmup_steps = num(key, value)?,
            "optim.max_steps" => self.optim.max_steps = num(key, value)?,
            "optim.beta1" => self.optim.beta1 = num(key, value)?,
            "optim.beta2" => self.optim.beta2 = num(key, value)?,
            "optim.eps" => self.optim.eps = num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, value)?,
            "optim.clip_norm" => {
                self.optim.clip_norm = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "batch.sequences" => self.batch_sequences = num(key, value)?,
            "batch.seconds" => self.batch_seconds = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "train.data" => self.data = PathBuf::from(value),
            "train.out_dir" => self.out_dir = PathBuf::from(value),
            "train.prefetch" => self.prefetch = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Full document listing every field; [`TrainConfig::parse`] reads it
    /// back to an equal value.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("modality", self.modality().to_string());
        match &self.model.prenet {
            PrenetConfig::Text(t) => {
                kv("prenet.vocab_size", t.vocab_size.to_string());
                kv("prenet.max_positions", t.max_positions.to_string());
            }
            PrenetConfig::Speech(p) => {
                kv("prenet.conv_channels", p.conv_channels.to_string());
                kv("prenet.pos_conv_kernel", p.pos_conv_kernel.to_string());
                kv("prenet.pos_conv_groups", p.pos_conv_groups.to_string());
                kv("prenet.standardize", p.standardize.to_string());
            }
        }
        let e = &self.model.encoder;
        kv("encoder.layers", e.layers.to_string());
        kv("encoder.heads", e.heads.to_string());
        kv("encoder.d_model", e.d_model.to_string());
        kv("encoder.d_ff", e.d_ff.to_string());
        kv("encoder.layerdrop", format!("{:?}", e.layerdrop));
        kv("encoder.final_norm", e.final_norm.to_string());
        kv("mask.length", self.mask.length.to_string());
        kv("mask.ratio", format!("{:?}", self.mask.ratio));
        kv("mask.adjust", format!("{:?}", self.mask.adjust));
        kv("mask.clones", self.mask.clones.to_string());
        kv("distill.top_k", self.distill.top_k.to_string());
        let d = &self.distill.decoder;
        kv("decoder.layers", d.layers.to_string());
        kv("decoder.dim", d.dim.to_string());
        kv("decoder.groups", d.groups.to_string());
        kv("decoder.kernel", d.kernel.to_string());
        kv("lambda.enabled", self.distill.lambda.is_some().to_string());
        if let Some(l) = &self.distill.lambda {
            kv("lambda.start", format!("{:?}", l.start));
            kv("lambda.end", format!("{:?}", l.end));
            kv("lambda.steps", l.steps.to_string());
        }
        kv("ema.start", format!("{:?}", self.ema.start));
        kv("ema.end", format!("{:?}", self.ema.end));
        kv("ema.anneal_steps", self.ema.anneal_steps.to_string());
        let o = &self.optim;
        kv("optim.lr_min", format!("{:?}", o.lr_min));
        kv("optim.lr_max", format!("{:?}", o.lr_max));
        kv("optim.warmup_steps", o.warmup_steps.to_string());
        kv("optim.max_steps", o.max_steps.to_string());
        kv("optim.beta1", format!("{:?}", o.beta1));
        kv("optim.beta2", format!("{:?}", o.beta2));
        kv("optim.eps", format!("{:?}", o.eps));
        kv("optim.weight_decay", format!("{:?}", o.weight_decay));
        kv("optim.clip_norm", o.clip_norm.map_or("none".to_string(), |c| format!("{c:?}")));
        kv("batch.sequences", self.batch_sequences.to_string());
        kv("batch.seconds", format!("{:?}", self.batch_seconds));
        kv("train.seed", self.seed.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.data", self.data.display().to_string());
        kv("train.out_dir", self.out_dir.display().to_string());
        kv("train.prefetch", self.prefetch.to_string());
        s
    }
}
