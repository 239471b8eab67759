//! Small synthetic corpora with planted structure, used for toy pretraining
//! and probing.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prenet::SAMPLE_RATE;
use crate::tokenizer::SPECIAL_TOKENS;

pub const VOCAB: usize = 64;
pub const FIRST_SYMBOL: usize = SPECIAL_TOKENS.len();
pub const OPEN: usize = FIRST_SYMBOL;
pub const CLOSE: usize = FIRST_SYMBOL + 1;

/// Seeded bigram chain over ids `FIRST_SYMBOL..VOCAB`: each symbol has a
/// few preferred successors that are followed with probability `strength`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    pub successors: Vec<Vec<usize>>,
    pub strength: f64,
}

impl BigramModel {
    pub fn new(structure_seed: u64, fanout: usize, strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let symbols = VOCAB - FIRST_SYMBOL;
        let successors = (0..symbols)
            .map(|_| {
                index::sample(&mut rng, symbols, fanout.min(symbols))
                    .iter()
                    .map(|i| i + FIRST_SYMBOL)
                    .collect()
            })
            .collect();
        Self { successors, strength }
    }

    fn next<R: Rng + ?Sized>(&self, prev: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.strength {
            let succ = &self.successors[prev - FIRST_SYMBOL];
            succ[rng.random_range(0..succ.len())]
        } else {
            rng.random_range(FIRST_SYMBOL..VOCAB)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(rng.random_range(FIRST_SYMBOL..VOCAB));
        while out.len() < len {
            let prev = out[out.len() - 1];
            out.push(self.next(prev, rng));
        }
        out
    }
}

pub fn bigram_corpus<R: Rng + ?Sized>(model: &BigramModel, count: usize, len: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..count).map(|_| model.sample(len, rng)).collect()
}

/// Balanced bracket string of even length `len` whose nesting never exceeds
/// `max_depth`.
pub fn bracket_sequence<R: Rng + ?Sized>(len: usize, max_depth: usize, rng: &mut R) -> Vec<usize> {
    let len = len - len % 2;
    let mut out = Vec::with_capacity(len);
    let mut depth = 0;
    for i in 0..len {
        let remaining = len - i;
        let open = if depth == 0 {
            true
        } else if depth >= max_depth || depth >= remaining {
            false
        } else {
            rng.random::<bool>()
        };
        if open {
            depth += 1;
            out.push(OPEN);
        } else {
            depth -= 1;
            out.push(CLOSE);
        }
    }
    out
}

/// Nesting depth after each token, clipped to `classes − 1`. Tokens other
/// than brackets leave the depth unchanged.
pub fn bracket_depths(seq: &[usize], classes: usize) -> Vec<usize> {
    let mut depth: usize = 0;
    seq.iter()
        .map(|&t| {
            if t == OPEN {
                depth += 1;
            } else if t == CLOSE {
                depth = depth.saturating_sub(1);
            }
            depth.min(classes - 1)
        })
        .collect()
}

pub fn bracket_corpus<R: Rng + ?Sized>(count: usize, len: usize, max_depth: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..count).map(|_| bracket_sequence(len, max_depth, rng)).collect()
}

/// Bracket string with filler tokens between the brackets. A filler is
/// drawn from the pool of the current nesting depth with probability
/// `tag_prob` and from the whole filler range otherwise, so depth can be
/// read from nearby context but not reliably from any single token.
pub fn tagged_bracket_sequence<R: Rng + ?Sized>(
    len: usize,
    max_depth: usize,
    filler_rate: f64,
    tag_prob: f64,
    rng: &mut R,
) -> Vec<usize> {
    let pools = max_depth + 1;
    let pool_size = (VOCAB - FILLER_START) / pools;
    let mut out = Vec::with_capacity(len);
    let mut depth = 0;
    while out.len() < len {
        let remaining = len - out.len();
        if depth < remaining && rng.random::<f64>() < filler_rate {
            let tok = if rng.random::<f64>() < tag_prob {
                FILLER_START + depth * pool_size + rng.random_range(0..pool_size)
            } else {
                rng.random_range(FILLER_START..FILLER_START + pools * pool_size)
            };
            out.push(tok);
            continue;
        }
        let open = if depth == 0 {
            remaining >= 2
        } else if depth >= max_depth || depth + 2 > remaining {
            false
        } else {
            rng.random::<bool>()
        };
        if open {
            depth += 1;
            out.push(OPEN);
        } else if depth > 0 {
            depth -= 1;
            out.push(CLOSE);
        } else {
            out.push(rng.random_range(FILLER_START..FILLER_START + pools * pool_size));
        }
    }
    out
}

pub const FILLER_START: usize = CLOSE + 1;

/// Frequency of tone class `class`.
pub fn tone_frequency(class: usize) -> f64 {
    220.0 * 2f64.powf(class as f64 / 2.0)
}

/// A sine at the class frequency with random phase and amplitude, plus
/// white noise.
pub fn tone_clip<R: Rng + ?Sized>(class: usize, samples: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let f = tone_frequency(class);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.3..0.8);
    (0..samples)
        .map(|i| {
            let t = i as f64 / f64::from(SAMPLE_RATE);
            amp * (std::f64::consts::TAU * f * t + phase).sin() + noise * rng.random_range(-1.0..1.0)
        })
        .collect()
}
