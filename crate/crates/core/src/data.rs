//! Corpus preparation: sentence-boundary text packing, WAV IO, audio
//! fingerprints, duplicate detection and chunk sampling.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::prenet::SAMPLE_RATE;
use crate::tokenizer::TokenizerModel;

pub const MAX_TEXT_LEN: usize = 512;
pub const PACKED_HEADER: &str = "bijou-packed v1";
pub const MANIFEST_HEADER: &str = "bijou-manifest v1";
pub const CHUNK_SECONDS: f64 = 30.0;

/// 371 ms at 16 kHz.
pub const FP_WINDOW: usize = 5936;
/// 11.6 ms at 16 kHz, rounded to whole samples.
pub const FP_HOP: usize = 186;
pub const FP_BANDS: usize = 33;
pub const FP_LOW_HZ: f64 = 300.0;
pub const FP_HIGH_HZ: f64 = 2000.0;
pub const DEFAULT_HAMMING_MAX: u32 = 3;
/// Shortest run of consecutive similar windows that counts as a duplicate.
pub const MIN_RUN: usize = 4;

// ---------------------------------------------------------------- text

/// Whole sentences packed up to a length budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub ids: Vec<usize>,
    /// Exclusive end offset of each sentence inside `ids`.
    pub sentence_ends: Vec<usize>,
    /// Set when a single sentence was longer than the budget and cut.
    pub truncated: bool,
}

impl TextSample {
    pub fn sentences(&self) -> impl Iterator<Item = &[usize]> {
        let mut start = 0;
        self.sentence_ends.iter().map(move |&end| {
            let s = &self.ids[start..end];
            start = end;
            s
        })
    }
}

/// Greedy packing: sentences are appended while the sample stays within
/// `max_len`. A sentence longer than `max_len` becomes its own truncated
/// sample. Empty sentences are dropped.
pub fn pack_ids<I>(sentences: I, max_len: usize) -> Result<Vec<TextSample>>
where
    I: IntoIterator<Item = Vec<usize>>,
{
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let mut out = Vec::new();
    let mut cur = TextSample { ids: Vec::new(), sentence_ends: Vec::new(), truncated: false };
    for sentence in sentences {
        if sentence.is_empty() {
            continue;
        }
        if sentence.len() > max_len {
            if !cur.ids.is_empty() {
                out.push(std::mem::replace(&mut cur, TextSample { ids: Vec::new(), sentence_ends: Vec::new(), truncated: false }));
            }
            out.push(TextSample {
                ids: sentence[..max_len].to_vec(),
                sentence_ends: vec![max_len],
                truncated: true,
            });
            continue;
        }
        if cur.ids.len() + sentence.len() > max_len {
            out.push(std::mem::replace(&mut cur, TextSample { ids: Vec::new(), sentence_ends: Vec::new(), truncated: false }));
        }
        cur.ids.extend(sentence);
        cur.sentence_ends.push(cur.ids.len());
    }
    if !cur.ids.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Tokenizes one sentence per line and packs the result.
pub fn pack_text<I, S>(sentences: I, tokenizer: &TokenizerModel, max_len: usize) -> Result<Vec<TextSample>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    pack_ids(sentences.into_iter().map(|s| tokenizer.encode(s.as_ref()).ids), max_len)
}

/// One sample per line: a flag (`ok` or `trunc`), a tab, then sentences
/// separated by ` | `, each a space-separated id list.
pub fn write_packed(path: &Path, samples: &[TextSample]) -> Result<()> {
    let mut text = format!("{PACKED_HEADER}\n");
    for s in samples {
        text.push_str(if s.truncated { "trunc\t" } else { "ok\t" });
        let parts: Vec<String> = s
            .sentences()
            .map(|ids| ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        text.push_str(&parts.join(" | "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_packed_line(line: &str) -> Option<TextSample> {
    let (flag, body) = line.split_once('\t')?;
    let truncated = match flag {
        "ok" => false,
        "trunc" => true,
        _ => return None,
    };
    let mut ids = Vec::new();
    let mut sentence_ends = Vec::new();
    for part in body.split(" | ") {
        for tok in part.split_whitespace() {
            ids.push(tok.parse::<usize>().ok()?);
        }
        sentence_ends.push(ids.len());
    }
    (!ids.is_empty()).then_some(TextSample { ids, sentence_ends, truncated })
}

fn read_packed_lines(path: &Path) -> Result<Vec<(usize, Option<TextSample>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(PACKED_HEADER) {
        return Err(Error::Data(format!("{} is not a packed text corpus", path.display())));
    }
    Ok(lines.enumerate().map(|(n, l)| (n + 2, parse_packed_line(l))).collect())
}

pub fn read_packed(path: &Path) -> Result<Vec<TextSample>> {
    read_packed_lines(path)?
        .into_iter()
        .map(|(n, s)| s.ok_or_else(|| Error::Data(format!("{}:{n}: malformed sample", path.display()))))
        .collect()
}

/// Like [`read_packed`] but skips malformed lines, returning their count.
pub fn read_packed_lenient(path: &Path) -> Result<(Vec<TextSample>, usize)> {
    let lines = read_packed_lines(path)?;
    let total = lines.len();
    let samples: Vec<TextSample> = lines.into_iter().filter_map(|(_, s)| s).collect();
    let bad = total - samples.len();
    Ok((samples, bad))
}

// ---------------------------------------------------------------- audio IO

/// Reads 16-bit PCM mono 16 kHz WAV into samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PCM mono {SAMPLE_RATE} Hz, got {} channel(s) at {} Hz, {} bits",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(fail)?;
    }
    writer.finalize().map_err(fail)
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub offset: f64,
    pub duration: f64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.offset, e.duration));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Data(format!("{} lacks the {MANIFEST_HEADER:?} header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Data(format!("{}:{}: malformed manifest line", path.display(), n + 2));
            let mut f = line.split('\t');
            let (Some(p), Some(o), Some(d), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            let offset: f64 = o.parse().map_err(|_| bad())?;
            let duration: f64 = d.parse().map_err(|_| bad())?;
            if !(offset >= 0.0 && duration > 0.0) {
                return Err(bad());
            }
            Ok(ManifestEntry { path: PathBuf::from(p), offset, duration })
        })
        .collect()
}

pub fn seconds_to_samples(s: f64) -> usize {
    (s * f64::from(SAMPLE_RATE)).round() as usize
}

pub fn samples_to_seconds(n: usize) -> f64 {
    n as f64 / f64::from(SAMPLE_RATE)
}

/// Samples of the region an entry points at.
pub fn load_entry(entry: &ManifestEntry) -> Result<Vec<f64>> {
    let wave = read_wav(&entry.path)?;
    let start = seconds_to_samples(entry.offset);
    let end = start + seconds_to_samples(entry.duration);
    if end > wave.len() {
        return Err(Error::Data(format!(
            "{}: region {}s+{}s exceeds the {}s file",
            entry.path.display(),
            entry.offset,
            entry.duration,
            samples_to_seconds(wave.len())
        )));
    }
    Ok(wave[start..end].to_vec())
}

// ---------------------------------------------------------------- fingerprints

/// One 32-bit code per analysis window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub codes: Vec<u32>,
}

/// `floor((n − window)/hop) + 1`, or 0 when not even one window fits.
pub fn window_count(samples: usize) -> usize {
    if samples < FP_WINDOW {
        0
    } else {
        (samples - FP_WINDOW) / FP_HOP + 1
    }
}

/// Reusable FFT plan, Hann window and band layout.
pub struct Fingerprinter {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// FFT bin range per band.
    bands: Vec<(usize, usize)>,
}

impl Default for Fingerprinter {
    fn default() -> Self {
        Self::new()
    }
}

impl Fingerprinter {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FP_WINDOW);
        let window = (0..FP_WINDOW)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / FP_WINDOW as f64).cos())
            .collect();
        let bin_hz = f64::from(SAMPLE_RATE) / FP_WINDOW as f64;
        let ratio = FP_HIGH_HZ / FP_LOW_HZ;
        let edge = |i: usize| {
            let hz = FP_LOW_HZ * ratio.powf(i as f64 / FP_BANDS as f64);
            (hz / bin_hz).ceil() as usize
        };
        let bands = (0..FP_BANDS).map(|b| (edge(b), edge(b + 1))).collect();
        Self { fft, window, bands }
    }

    fn band_energies(&self, frame: &[f64], buf: &mut [Complex<f64>]) -> [f64; FP_BANDS] {
        for ((slot, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            *slot = Complex::new(x * w, 0.0);
        }
        self.fft.process(buf);
        let mut e = [0.0; FP_BANDS];
        for (b, &(lo, hi)) in self.bands.iter().enumerate() {
            e[b] = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
        }
        e
    }

    /// Bit `b` of window `n` is set when
    /// `(E[n][b] − E[n][b+1]) − (E[n−1][b] − E[n−1][b+1]) > 0`, with the
    /// energies before the first window taken as zero.
    pub fn fingerprint(&self, wave: &[f64]) -> Result<Fingerprint> {
        let n = window_count(wave.len());
        if n == 0 {
            return Err(Error::Input(format!(
                "fingerprinting needs at least {FP_WINDOW} samples, got {}",
                wave.len()
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); FP_WINDOW];
        let mut prev = [0.0; FP_BANDS];
        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            let e = self.band_energies(&wave[i * FP_HOP..i * FP_HOP + FP_WINDOW], &mut buf);
            let mut code = 0u32;
            for b in 0..32 {
                if (e[b] - e[b + 1]) - (prev[b] - prev[b + 1]) > 0.0 {
                    code |= 1 << b;
                }
            }
            codes.push(code);
            prev = e;
        }
        Ok(Fingerprint { codes })
    }
}

pub fn fingerprint(wave: &[f64]) -> Result<Fingerprint> {
    Fingerprinter::new().fingerprint(wave)
}

/// A diagonal run of similar windows: `a[a_start + i] ~ b[b_start + i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchRun {
    pub a_start: usize,
    pub b_start: usize,
    pub len: usize,
}

impl MatchRun {
    /// Sample range of `b` covered by the run's windows.
    pub fn b_region(&self) -> (usize, usize) {
        (self.b_start * FP_HOP, (self.b_start + self.len - 1) * FP_HOP + FP_WINDOW)
    }
}

/// Maximal diagonal runs of at least [`MIN_RUN`] windows whose codes are
/// within `hamming_max` bits; shorter runs are discarded.
pub fn find_duplicates(a: &Fingerprint, b: &Fingerprint, hamming_max: u32) -> Vec<MatchRun> {
    let (na, nb) = (a.codes.len(), b.codes.len());
    let mut runs = Vec::new();
    // Diagonal d = j − i, shifted to be non-negative.
    for d in 0..na + nb {
        let (mut i, mut j) = if d < na { (na - 1 - d, 0) } else { (0, d - na + 1) };
        if j >= nb {
            continue;
        }
        let mut run_start: Option<(usize, usize)> = None;
        let mut len = 0;
        while i < na && j < nb {
            if (a.codes[i] ^ b.codes[j]).count_ones() <= hamming_max {
                if run_start.is_none() {
                    run_start = Some((i, j));
                }
                len += 1;
            } else {
                if let Some((ai, bj)) = run_start.take() {
                    if len >= MIN_RUN {
                        runs.push(MatchRun { a_start: ai, b_start: bj, len });
                    }
                }
                len = 0;
            }
            i += 1;
            j += 1;
        }
        if let Some((ai, bj)) = run_start {
            if len >= MIN_RUN {
                runs.push(MatchRun { a_start: ai, b_start: bj, len });
            }
        }
    }
    runs.sort_by_key(|r| (r.b_start, r.a_start));
    runs
}

/// Merges `[start, end)` ranges into a sorted disjoint list.
pub fn merge_intervals(mut ranges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    ranges.retain(|(s, e)| e > s);
    ranges.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
    for (s, e) in ranges {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// `[0, len)` minus the excluded ranges.
pub fn complement(len: usize, excluded: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for &(s, e) in &merge_intervals(excluded.to_vec()) {
        let s = s.min(len);
        if s > cursor {
            out.push((cursor, s));
        }
        cursor = cursor.max(e.min(len));
    }
    if cursor < len {
        out.push((cursor, len));
    }
    out
}

/// Regions of `b` duplicated from `a`.
pub fn duplicate_regions(a: &Fingerprint, b: &Fingerprint, hamming_max: u32) -> Vec<(usize, usize)> {
    merge_intervals(find_duplicates(a, b, hamming_max).iter().map(MatchRun::b_region).collect())
}

// ---------------------------------------------------------------- dedup + sampling

#[derive(Debug, Clone, PartialEq)]
pub struct DedupConfig {
    pub target_hours: f64,
    pub chunk_seconds: f64,
    pub hamming_max: u32,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { target_hours: 1.0, chunk_seconds: CHUNK_SECONDS, hamming_max: DEFAULT_HAMMING_MAX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceFault {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledCorpus {
    pub chunks: Vec<ManifestEntry>,
    /// Excluded sample ranges per source, in source-region coordinates.
    pub excluded: Vec<(PathBuf, Vec<(usize, usize)>)>,
    pub faults: Vec<SourceFault>,
    /// Set when the eligible pool ran out before the target was reached.
    pub exhausted: bool,
}

impl SampledCorpus {
    pub fn hours(&self) -> f64 {
        self.chunks.iter().map(|c| c.duration).sum::<f64>() / 3600.0
    }
}

struct Source {
    entry: ManifestEntry,
    wave_len: usize,
    fp: Fingerprint,
}

/// Removes duplicated regions (a later source loses what an earlier one
/// already covers) and regions matching the exclusion list, then draws
/// non-overlapping chunks uniformly from what is left.
pub fn dedup_and_sample<R: Rng + ?Sized>(
    corpus: &[ManifestEntry],
    exclusions: &[ManifestEntry],
    cfg: &DedupConfig,
    rng: &mut R,
) -> Result<SampledCorpus> {
    if !(cfg.chunk_seconds > 0.0 && cfg.target_hours >= 0.0) {
        return Err(Error::Config("chunk_seconds must be positive and target_hours non-negative".into()));
    }
    let chunk = seconds_to_samples(cfg.chunk_seconds);
    let target_chunks = (cfg.target_hours * 3600.0 / cfg.chunk_seconds + 1e-9).floor() as usize;
    let fper = Fingerprinter::new();
    let mut faults = Vec::new();
    let mut load = |entry: &ManifestEntry| -> Option<Source> {
        let result = load_entry(entry).and_then(|w| Ok((w.len(), fper.fingerprint(&w)?)));
        match result {
            Ok((wave_len, fp)) => Some(Source { entry: entry.clone(), wave_len, fp }),
            Err(e) => {
                faults.push(SourceFault { path: entry.path.clone(), message: e.to_string() });
                None
            }
        }
    };
    let sources: Vec<Source> = corpus.iter().filter_map(&mut load).collect();
    let excl: Vec<Source> = exclusions.iter().filter_map(&mut load).collect();

    let mut excluded = Vec::with_capacity(sources.len());
    for (k, src) in sources.iter().enumerate() {
        let mut ranges = Vec::new();
        for earlier in &sources[..k] {
            ranges.extend(duplicate_regions(&earlier.fp, &src.fp, cfg.hamming_max));
        }
        for ex in &excl {
            ranges.extend(duplicate_regions(&ex.fp, &src.fp, cfg.hamming_max));
        }
        excluded.push((src.entry.path.clone(), merge_intervals(ranges)));
    }

    let mut slots = Vec::new();
    for (src, (_, ranges)) in sources.iter().zip(&excluded) {
        for (s, e) in complement(src.wave_len, ranges) {
            let n = (e - s) / chunk;
            if n == 0 {
                continue;
            }
            let slack = e - s - n * chunk;
            let mut jitter: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
            jitter.sort_unstable();
            for (i, j) in jitter.into_iter().enumerate() {
                let at = s + i * chunk + j;
                slots.push(ManifestEntry {
                    path: src.entry.path.clone(),
                    offset: src.entry.offset + samples_to_seconds(at),
                    duration: samples_to_seconds(chunk),
                });
            }
        }
    }
    slots.shuffle(rng);
    let exhausted = slots.len() < target_chunks;
    slots.truncate(target_chunks);
    Ok(SampledCorpus { chunks: slots, excluded, faults, exhausted })
}

/// Manifest entries covering whole WAV files.
pub fn manifest_from_wavs(paths: &[PathBuf]) -> Result<Vec<ManifestEntry>> {
    paths
        .iter()
        .map(|p| {
            let reader = hound::WavReader::open(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            let n = reader.duration() as usize;
            Ok(ManifestEntry { path: p.clone(), offset: 0.0, duration: samples_to_seconds(n) })
        })
        .collect()
}

/// Groups chunk lengths (in samples) into batches whose total audio stays
/// within `budget_seconds`; a chunk longer than the budget forms its own
/// batch.
pub fn batch_by_seconds(lengths: &[usize], budget_seconds: f64) -> Vec<Vec<usize>> {
    let budget = seconds_to_samples(budget_seconds);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut used = 0;
    for (i, &n) in lengths.iter().enumerate() {
        match out.last_mut() {
            Some(batch) if used + n <= budget => {
                batch.push(i);
                used += n;
            }
            _ => {
                out.push(vec![i]);
                used = n;
            }
        }
    }
    out
}

/// Counts how often each source appears in a chunk list.
pub fn chunks_per_source(chunks: &[ManifestEntry]) -> HashMap<PathBuf, usize> {
    let mut m = HashMap::new();
    for c in chunks {
        *m.entry(c.path.clone()).or_default() += 1;
    }
    m
}
