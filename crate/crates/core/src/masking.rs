//! Block masking with per-clone ratio jitter, and visible-frame selection.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on the masked fraction of any clone.
pub const MAX_MASKED_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Positions per span.
    pub length: usize,
    /// Target masked fraction.
    pub ratio: f64,
    /// Relative jitter of the ratio, drawn per clone.
    pub adjust: f64,
    /// Number of independently masked clones per example.
    pub clones: usize,
}

impl MaskSpec {
    pub fn speech_base() -> Self {
        Self {
            length: 5,
            ratio: 0.5,
            adjust: 0.05,
            clones: 8,
        }
    }

    pub fn speech_large() -> Self {
        Self {
            length: 5,
            ratio: 0.55,
            adjust: 0.1,
            clones: 12,
        }
    }

    pub fn text() -> Self {
        Self {
            length: 3,
            ratio: 0.6,
            adjust: 0.0,
            clones: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("mask length must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        if !(0.0..1.0).contains(&self.adjust) {
            return Err(Error::Config(format!("mask adjust {} outside [0, 1)", self.adjust)));
        }
        if self.clones == 0 {
            return Err(Error::Config("at least one mask clone is required".into()));
        }
        Ok(())
    }
}

/// `clones` boolean masks over one sequence; `true` marks a masked position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Draws one mask per clone. Each clone jitters the ratio to
/// `R·(1 + u·A)` with `u ~ U(-1, 1)`, then adds spans of `length` positions
/// at distinct uniformly drawn starts until `round(T·R')` positions are
/// covered. Coverage is capped at `min(0.95·T, T − 1)`.
pub fn sample_masks<R: Rng + ?Sized>(len: usize, spec: &MaskSpec, rng: &mut R) -> Result<MaskSet> {
    if len < 2 {
        return Err(Error::Input(format!("cannot mask a sequence of length {len}")));
    }
    spec.validate()?;
    let masks = (0..spec.clones).map(|_| sample_one(len, spec, rng)).collect();
    Ok(MaskSet { masks })
}

fn sample_one<R: Rng + ?Sized>(len: usize, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let u: f64 = rng.random_range(-1.0..1.0);
    let ratio = spec.ratio * (1.0 + u * spec.adjust);
    let cap = ((MAX_MASKED_FRACTION * len as f64).floor() as usize).min(len - 1).max(1);
    let target = ((len as f64 * ratio).round() as usize).clamp(1, cap);

    let span = spec.length.min(len);
    let starts = len - span + 1;
    let order = index::sample(rng, starts, starts);
    let mut mask = vec![false; len];
    let mut covered = 0;
    for start in order.iter() {
        let mut added = Vec::with_capacity(span);
        for p in start..start + span {
            if !mask[p] {
                mask[p] = true;
                added.push(p);
            }
        }
        covered += added.len();
        if covered > cap {
            for &p in added.iter().rev().take(covered - cap) {
                mask[p] = false;
            }
            covered = cap;
        }
        if covered >= target {
            break;
        }
    }
    mask
}

/// Restores original positions after visible-only encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleIndex {
    /// Per original position, the row in the visible sequence (`None` when masked).
    pub slots: Vec<Option<usize>>,
    /// Original positions of the visible rows, in order.
    pub positions: Vec<usize>,
}

/// Gathers the unmasked rows of `[T × d]` frames, preserving order.
pub fn split_visible(frames: &Tensor, mask: &[bool]) -> Result<(Tensor, VisibleIndex)> {
    let t = frames.shape()[0];
    if mask.len() != t {
        return Err(Error::Contract(format!(
            "mask of length {} for {t} frames",
            mask.len()
        )));
    }
    let positions: Vec<usize> = (0..t).filter(|&i| !mask[i]).collect();
    if positions.is_empty() {
        return Err(Error::Contract("every position is masked".into()));
    }
    let mut slots = vec![None; t];
    for (row, &p) in positions.iter().enumerate() {
        slots[p] = Some(row);
    }
    let visible = frames.gather_rows(&positions)?;
    Ok((visible, VisibleIndex { slots, positions }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_match_tables() {
        assert_eq!(MaskSpec::speech_base(), MaskSpec { length: 5, ratio: 0.5, adjust: 0.05, clones: 8 });
        assert_eq!(MaskSpec::speech_large(), MaskSpec { length: 5, ratio: 0.55, adjust: 0.1, clones: 12 });
        assert_eq!(MaskSpec::text(), MaskSpec { length: 3, ratio: 0.6, adjust: 0.0, clones: 8 });
    }

    #[test]
    fn rejects_short_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_masks(1, &MaskSpec::text(), &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn full_length_span_is_clipped() {
        let spec = MaskSpec { length: 10, ratio: 0.6, adjust: 0.0, clones: 4 };
        let set = sample_masks(10, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for m in &set.masks {
            assert_eq!(m.iter().filter(|&&b| b).count(), 9);
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let spec = MaskSpec::speech_base();
        let a = sample_masks(50, &spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_masks(50, &spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_visible_by_hand() {
        let frames = Tensor::new(&[3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let (vis, idx) = split_visible(&frames, &[false, true, false]).unwrap();
        assert_eq!(vis.data(), &[10.0, 30.0]);
        assert_eq!(idx.slots, vec![Some(0), None, Some(1)]);
        let (vis, idx) = split_visible(&frames, &[false; 3]).unwrap();
        assert_eq!(vis.data(), frames.data());
        assert_eq!(idx.positions, vec![0, 1, 2]);
        assert!(split_visible(&frames, &[true; 3]).is_err());
        assert!(split_visible(&frames, &[true; 2]).is_err());
    }

    #[test]
    fn scatter_restores_visible_rows() {
        let frames = Tensor::new(&[4, 2], (0..8).map(f64::from).collect()).unwrap();
        let mask = [true, false, true, false];
        let (vis, idx) = split_visible(&frames, &mask).unwrap();
        let fill = Tensor::new(&[2], vec![-1.0, -1.0]).unwrap();
        let back = Tensor::scatter_rows(&vis, &fill, &idx.slots).unwrap();
        for t in 0..4 {
            let row = &back.data()[t * 2..t * 2 + 2];
            if mask[t] {
                assert_eq!(row, &[-1.0, -1.0]);
            } else {
                assert_eq!(row, &frames.data()[t * 2..t * 2 + 2]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn every_clone_partitions_positions(
            len in 2usize..120,
            length in 1usize..12,
            ratio in 0.05f64..0.95,
            adjust in 0.0f64..0.5,
            seed in 0u64..1000,
        ) {
            let spec = MaskSpec { length, ratio, adjust, clones: 3 };
            let set = sample_masks(len, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for m in &set.masks {
                let masked = m.iter().filter(|&&b| b).count();
                proptest::prop_assert!(masked >= 1);
                proptest::prop_assert!(masked <= len - 1);
                let bound = (0.95f64).min(ratio * (1.0 + adjust) + length as f64 / len as f64);
                proptest::prop_assert!(masked as f64 / len as f64 <= bound.max(1.0 / len as f64) + 1e-12,
                    "masked {} of {}", masked, len);
            }
        }
    }
}
