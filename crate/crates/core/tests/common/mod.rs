#![allow(dead_code)]

pub mod audio;
pub mod grad;

use bijou::config::TrainConfig;
use bijou::synthetic;

/// Two-layer, width-32 text model over the 64-symbol synthetic vocabulary.
pub fn toy_text_config(steps: u64, seed: u64) -> TrainConfig {
    let doc = format!(
        "preset = text-base-mlm
prenet.vocab_size = {vocab}
prenet.max_positions = 64
encoder.layers = 2
encoder.heads = 4
encoder.d_model = 32
encoder.d_ff = 128
distill.top_k = 2
decoder.layers = 2
decoder.dim = 32
decoder.kernel = 3
mask.clones = 2
lambda.start = 20.0
lambda.end = 1.0
lambda.steps = {steps}
ema.start = 0.99
ema.end = 0.999
ema.anneal_steps = {steps}
optim.lr_max = 0.002
optim.warmup_steps = {warmup}
optim.max_steps = {steps}
batch.sequences = 4
train.seed = {seed}
",
        vocab = synthetic::VOCAB,
        warmup = (steps / 20).max(1).min(steps.saturating_sub(1)),
    );
    TrainConfig::parse(&doc).expect("toy config")
}
