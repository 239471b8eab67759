//! Modality-specific featurizers: token embeddings for text and a strided
//! convolution ladder over raw 16 kHz waveforms for speech.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamSet};
use crate::tensor::{ConvGeometry, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;

/// Kernel widths of the waveform convolution ladder.
pub const AUDIO_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
/// Strides of the waveform convolution ladder (product 320, about 20 ms).
pub const AUDIO_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Speech,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "speech" => Ok(Modality::Speech),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Frame features fed to both encoders.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// `[T × d_model]`.
    pub frames: Tensor,
    pub modality: Modality,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextPrenetConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechPrenetConfig {
    /// Channel width of every convolution in the ladder (512 at full scale).
    pub conv_channels: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    /// Per-chunk zero-mean/unit-variance standardization of the waveform.
    pub standardize: bool,
}

impl Default for SpeechPrenetConfig {
    fn default() -> Self {
        Self {
            conv_channels: 512,
            pos_conv_kernel: 19,
            pos_conv_groups: 16,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrenetConfig {
    Text(TextPrenetConfig),
    Speech(SpeechPrenetConfig),
}

impl PrenetConfig {
    pub fn modality(&self) -> Modality {
        match self {
            PrenetConfig::Text(_) => Modality::Text,
            PrenetConfig::Speech(_) => Modality::Speech,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        match self {
            PrenetConfig::Text(c) => {
                if c.vocab_size == 0 || c.max_positions == 0 {
                    return Err(Error::Config("text pre-net needs vocab_size and max_positions > 0".into()));
                }
            }
            PrenetConfig::Speech(c) => {
                if c.conv_channels == 0 {
                    return Err(Error::Config("speech pre-net needs conv_channels > 0".into()));
                }
                if c.pos_conv_groups == 0 || d_model % c.pos_conv_groups != 0 {
                    return Err(Error::Config(format!(
                        "d_model {d_model} not divisible by positional conv groups {}",
                        c.pos_conv_groups
                    )));
                }
                if c.pos_conv_kernel % 2 == 0 {
                    return Err(Error::Config("positional conv kernel must be odd".into()));
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self, d_model: usize) -> usize {
        match self {
            PrenetConfig::Text(c) => (c.vocab_size + c.max_positions) * d_model,
            PrenetConfig::Speech(c) => {
                let ch = c.conv_channels;
                let convs: usize = AUDIO_KERNELS
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let c_in = if i == 0 { 1 } else { ch };
                        c_in * ch * k + 2 * ch
                    })
                    .sum();
                let proj = 2 * ch + ch * d_model + d_model;
                let pos = d_model * (d_model / c.pos_conv_groups) * c.pos_conv_kernel + d_model;
                convs + proj + pos
            }
        }
    }

    pub fn init<R: Rng>(&self, d_model: usize, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let mut init = Init { rng };
        match self {
            PrenetConfig::Text(c) => {
                let v = init.normal(c.vocab_size * d_model, 0.02);
                params.insert("prenet.embed.tokens", &[c.vocab_size, d_model], v, true)?;
                let p = init.normal(c.max_positions * d_model, 0.02);
                params.insert("prenet.embed.positions", &[c.max_positions, d_model], p, true)?;
            }
            PrenetConfig::Speech(c) => {
                let ch = c.conv_channels;
                for (i, &k) in AUDIO_KERNELS.iter().enumerate() {
                    let c_in = if i == 0 { 1 } else { ch };
                    let std = (2.0 / (c_in * k) as f64).sqrt();
                    let w = init.normal(ch * c_in * k, std);
                    params.insert(&format!("prenet.conv.{i}.weight"), &[ch, c_in, k], w, true)?;
                    params.insert(&format!("prenet.conv.{i}.norm.gain"), &[ch], vec![1.0; ch], false)?;
                    params.insert(&format!("prenet.conv.{i}.norm.bias"), &[ch], vec![0.0; ch], false)?;
                }
                params.insert("prenet.proj.norm.gain", &[ch], vec![1.0; ch], false)?;
                params.insert("prenet.proj.norm.bias", &[ch], vec![0.0; ch], false)?;
                let w = init.normal(ch * d_model, (1.0 / ch as f64).sqrt());
                params.insert("prenet.proj.weight", &[ch, d_model], w, true)?;
                params.insert("prenet.proj.bias", &[d_model], vec![0.0; d_model], false)?;
                let per_group = d_model / c.pos_conv_groups;
                let fan_in = per_group * c.pos_conv_kernel;
                let w = init.normal(d_model * fan_in, (1.0 / fan_in as f64).sqrt());
                params.insert("prenet.pos_conv.weight", &[d_model, per_group, c.pos_conv_kernel], w, true)?;
                params.insert("prenet.pos_conv.bias", &[d_model], vec![0.0; d_model], false)?;
            }
        }
        Ok(())
    }
}

/// Token-row gather, optionally plus the first `T` rows of a positional
/// table.
pub fn embed_text(ids: &[usize], table: &Tensor, positions: Option<&Tensor>) -> Result<FeatureSequence> {
    let vocab = table.shape()[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let mut frames = table.gather_rows(ids)?;
    if let Some(pos) = positions {
        let max = pos.shape()[0];
        if ids.len() > max {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds {max} positions",
                ids.len()
            )));
        }
        let rows: Vec<usize> = (0..ids.len()).collect();
        frames = frames.add(&pos.gather_rows(&rows)?)?;
    }
    Ok(FeatureSequence {
        frames,
        modality: Modality::Text,
    })
}

/// Frame count produced by the convolution ladder for `samples` inputs,
/// `None` when the input is shorter than the receptive field.
pub fn audio_frame_count(samples: usize) -> Option<usize> {
    AUDIO_KERNELS
        .iter()
        .zip(AUDIO_STRIDES)
        .try_fold(samples, |len, (&k, s)| ConvGeometry::new(s, 0, 1).output_len(len, k))
}

/// Shortest waveform that yields one frame (400 samples, 25 ms).
pub fn min_audio_samples() -> usize {
    AUDIO_KERNELS
        .iter()
        .zip(AUDIO_STRIDES)
        .rev()
        .fold(1, |len, (&k, s)| (len - 1) * s + k)
}

fn standardize(wave: &[f64]) -> Vec<f64> {
    let (mean, var) = crate::tensor::mean_var(wave);
    let s = 1.0 / (var + NORM_EPS).sqrt();
    wave.iter().map(|x| (x - mean) * s).collect()
}

/// Waveform featurizer: seven unpadded strided convolutions, each followed
/// by channel normalization and GELU, then a projection to `d_model` and a
/// grouped convolutional positional term.
pub fn featurize_audio(
    wave: &[f64],
    cfg: &SpeechPrenetConfig,
    binder: &Binder,
) -> Result<FeatureSequence> {
    if audio_frame_count(wave.len()).is_none() {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than the {}-sample receptive field",
            wave.len(),
            min_audio_samples()
        )));
    }
    let samples = if cfg.standardize {
        standardize(wave)
    } else {
        wave.to_vec()
    };
    let mut x = Tensor::new(&[1, samples.len()], samples)?;
    for (i, s) in AUDIO_STRIDES.into_iter().enumerate() {
        let w = binder.get(&format!("prenet.conv.{i}.weight"))?;
        let y = x.conv1d(&w, None, ConvGeometry::new(s, 0, 1))?.transpose()?;
        let y = y
            .layer_norm(
                &binder.get(&format!("prenet.conv.{i}.norm.gain"))?,
                &binder.get(&format!("prenet.conv.{i}.norm.bias"))?,
                NORM_EPS,
            )?
            .gelu();
        x = y.transpose()?;
    }
    let frames = x
        .transpose()?
        .layer_norm(
            &binder.get("prenet.proj.norm.gain")?,
            &binder.get("prenet.proj.norm.bias")?,
            NORM_EPS,
        )?
        .matmul(&binder.get("prenet.proj.weight")?)?
        .add_row(&binder.get("prenet.proj.bias")?)?;
    let pad = cfg.pos_conv_kernel / 2;
    let pos = frames
        .transpose()?
        .conv1d(
            &binder.get("prenet.pos_conv.weight")?,
            Some(&binder.get("prenet.pos_conv.bias")?),
            ConvGeometry::new(1, pad, cfg.pos_conv_groups),
        )?
        .gelu()
        .transpose()?;
    Ok(FeatureSequence {
        frames: frames.add(&pos)?,
        modality: Modality::Speech,
    })
}

/// Modality input for one training or probe example.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Text(Vec<usize>),
    Speech(Vec<f64>),
}

/// Runs the configured pre-net on an example.
pub fn featurize(example: &Example, cfg: &PrenetConfig, binder: &Binder) -> Result<FeatureSequence> {
    match (example, cfg) {
        (Example::Text(ids), PrenetConfig::Text(_)) => embed_text(
            ids,
            &binder.get("prenet.embed.tokens")?,
            Some(&binder.get("prenet.embed.positions")?),
        ),
        (Example::Speech(wave), PrenetConfig::Speech(c)) => featurize_audio(wave, c, binder),
        _ => Err(Error::Config("example modality does not match the pre-net".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Layer-by-layer floor formula, written independently of ConvGeometry.
    fn ladder_oracle(mut len: i64) -> i64 {
        for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }

    #[test]
    fn ladder_arithmetic() {
        assert_eq!(audio_frame_count(16_000), Some(49));
        assert_eq!(audio_frame_count(400), Some(1));
        assert_eq!(audio_frame_count(399), None);
        assert_eq!(min_audio_samples(), 400);
        assert_eq!(ladder_oracle(16_000), 49);
        assert_eq!(AUDIO_STRIDES.iter().product::<usize>(), 320);
    }

    #[test]
    fn text_gather_returns_rows() {
        let table = Tensor::new(&[4, 2], vec![0., 0., 1., 1., 2., 2., 3., 3.]).unwrap();
        let f = embed_text(&[3, 1], &table, None).unwrap();
        assert_eq!(f.frames.data(), &[3., 3., 1., 1.]);
        assert_eq!(f.len(), 2);
        assert!(matches!(embed_text(&[4], &table, None), Err(Error::Input(_))));
    }

    fn tiny_speech() -> (SpeechPrenetConfig, ParamSet) {
        let cfg = SpeechPrenetConfig {
            conv_channels: 4,
            pos_conv_kernel: 3,
            pos_conv_groups: 2,
            standardize: true,
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        PrenetConfig::Speech(cfg.clone()).init(8, &mut ps, &mut rng).unwrap();
        (cfg, ps)
    }

    #[test]
    fn audio_featurizer_shapes_and_errors() {
        let (cfg, ps) = tiny_speech();
        assert_eq!(ps.scalar_count(), PrenetConfig::Speech(cfg.clone()).param_count(8));
        let binder = Binder::new(&ps, false);
        let wave: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        let f = featurize_audio(&wave, &cfg, &binder).unwrap();
        assert_eq!(f.frames.shape(), &[49, 8]);
        let f = featurize_audio(&wave[..400], &cfg, &binder).unwrap();
        assert_eq!(f.len(), 1);
        let err = featurize_audio(&wave[..399], &cfg, &binder).unwrap_err();
        assert!(err.to_string().contains("400"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn frame_count_matches_closed_form(len in 0usize..200_000) {
            let expected = ladder_oracle(len as i64);
            let got = audio_frame_count(len).map(|v| v as i64).unwrap_or(0);
            proptest::prop_assert_eq!(got, expected);
        }

        #[test]
        fn doubling_length_at_least_doubles_minus_one(len in 400usize..100_000) {
            let a = audio_frame_count(len).unwrap();
            let b = audio_frame_count(2 * len).unwrap();
            proptest::prop_assert!(b + 1 >= 2 * a);
        }
    }
}
