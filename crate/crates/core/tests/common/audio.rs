//! Synthetic audio with planted shared segments.

use std::path::{Path, PathBuf};

use bijou::data::{self, ManifestEntry, FP_HOP, FP_WINDOW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATE: usize = 16_000;

pub fn noise(n: usize, amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| amp * rng.random_range(-1.0..1.0)).collect()
}

/// `len` samples of noise from `seed` with `shared` written at `at`.
pub fn with_segment(len: usize, amp: f64, seed: u64, shared: &[f64], at: usize) -> Vec<f64> {
    let mut w = noise(len, amp, seed);
    w[at..at + shared.len()].copy_from_slice(shared);
    w
}

/// Length of a segment that fully contains exactly `windows` analysis
/// windows when it starts on a hop boundary.
pub fn segment_for_windows(windows: usize) -> usize {
    FP_WINDOW + (windows - 1) * FP_HOP
}

pub fn write(dir: &Path, name: &str, samples: &[f64]) -> PathBuf {
    let p = dir.join(name);
    data::write_wav(&p, samples).unwrap();
    p
}

pub fn whole(path: &Path, samples: usize) -> ManifestEntry {
    ManifestEntry { path: path.to_path_buf(), offset: 0.0, duration: samples as f64 / RATE as f64 }
}

pub const SHARED_SECONDS: usize = 40;

pub struct Planted {
    pub dir: tempfile::TempDir,
    pub a: ManifestEntry,
    pub b: ManifestEntry,
    /// Sample range of the shared segment inside `b`.
    pub region: (usize, usize),
}

/// A 60 s and a 70 s file sharing 40 s of audio at different offsets.
pub fn planted_40s() -> Planted {
    let dir = tempfile::tempdir().unwrap();
    let shared = noise(SHARED_SECONDS * RATE, 0.3, 1);
    let (a_len, b_len) = (60 * RATE, 70 * RATE);
    let (a_at, b_at) = (900 * FP_HOP, 2500 * FP_HOP + 37);
    let a = write(dir.path(), "a.wav", &with_segment(a_len, 0.3, 2, &shared, a_at));
    let b = write(dir.path(), "b.wav", &with_segment(b_len, 0.3, 3, &shared, b_at));
    Planted { a: whole(&a, a_len), b: whole(&b, b_len), region: (b_at, b_at + shared.len()), dir }
}

/// Window-level resolution of the fingerprint: a reported region may differ
/// from the planted one by at most one analysis window at each edge.
pub fn close_to(found: (usize, usize), planted: (usize, usize)) -> bool {
    found.0.abs_diff(planted.0) <= FP_WINDOW && found.1.abs_diff(planted.1) <= FP_WINDOW
}

/// Quiet shared content between loud unrelated noise, so only windows lying
/// entirely inside the shared segment can match. The first of those still
/// differs because its code depends on the previous window, so a segment
/// holding `w` whole windows plants `w − 1` matching codes.
pub fn planted_windows(matching: usize) -> (tempfile::TempDir, ManifestEntry, ManifestEntry) {
    let dir = tempfile::tempdir().unwrap();
    let shared = noise(segment_for_windows(matching + 1), 0.001, 10);
    let len = 10 * RATE;
    let a = write(dir.path(), "a.wav", &with_segment(len, 0.9, 11, &shared, 200 * FP_HOP));
    let b = write(dir.path(), "b.wav", &with_segment(len, 0.9, 12, &shared, 500 * FP_HOP));
    (dir, whole(&a, len), whole(&b, len))
}

pub fn best_diagonal(a: &data::Fingerprint, b: &data::Fingerprint) -> usize {
    // Longest stretch of similar codes on the planted diagonal.
    let shift = 300;
    let mut best = 0;
    let mut cur = 0;
    for i in 0..a.codes.len() {
        let j = i + shift;
        if j < b.codes.len() && (a.codes[i] ^ b.codes[j]).count_ones() <= data::DEFAULT_HAMMING_MAX {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}
