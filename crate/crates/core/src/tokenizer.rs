//! Byte-pair-encoding tokenizer with French-aware pre-tokenization.
//!
//! Apostrophe variants are folded to U+0027 and short elided prefixes
//! ("c'", "l'", "quelqu'") become single pre-tokens. Words that follow a
//! space carry a leading [`SPACE_MARK`] symbol so decoding can restore the
//! normalized text exactly.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

/// Marks a word that was preceded by whitespace.
pub const SPACE_MARK: char = '\u{2581}';

pub const FILE_HEADER: &str = "bijou-tok v1";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

/// Longest letter run that may bind to a following apostrophe.
pub const MAX_ELISION_LETTERS: usize = 6;

pub const DEFAULT_VOCAB_SIZE: usize = 50_000;

const APOSTROPHE_VARIANTS: [char; 3] = ['\u{2019}', '\u{02BC}', '\u{FF07}'];

/// Folds apostrophe variants to `'`, applies NFC and collapses whitespace
/// runs to single spaces (trimming both ends). A backtick counts as an
/// apostrophe only between two letters.
pub fn normalize(text: &str) -> String {
    let chars: Vec<char> = text.nfc().collect();
    let mut folded = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let mapped = if APOSTROPHE_VARIANTS.contains(&c) {
            '\''
        } else if c == '`'
            && i > 0
            && chars[i - 1].is_alphabetic()
            && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
        {
            '\''
        } else {
            c
        };
        folded.push(mapped);
    }
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Validates UTF-8 input before normalization.
pub fn normalize_bytes(bytes: &[u8]) -> Result<String> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Input(format!("invalid UTF-8: {e}")))?;
    Ok(normalize(text))
}

/// A pre-token and whether whitespace preceded it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreToken {
    pub text: String,
    pub space_before: bool,
}

/// Splits normalized text into words, keeping elisions attached to the
/// apostrophe.
pub fn pretokenize(text: &str) -> Vec<String> {
    pretokenize_spaced(text).into_iter().map(|t| t.text).collect()
}

pub fn pretokenize_spaced(text: &str) -> Vec<PreToken> {
    let mut out = Vec::new();
    for (chunk_idx, chunk) in text.split_whitespace().enumerate() {
        let mut space = chunk_idx > 0;
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        let mut word_letters_only = true;
        let mut word_len = 0;
        let flush = |word: &mut String, out: &mut Vec<PreToken>, space: &mut bool| {
            if !word.is_empty() {
                out.push(PreToken {
                    text: std::mem::take(word),
                    space_before: *space,
                });
                *space = false;
            }
        };
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                word.push(c);
                word_len += 1;
                word_letters_only &= c.is_alphabetic();
                continue;
            }
            let elision = c == '\''
                && word_letters_only
                && (1..=MAX_ELISION_LETTERS).contains(&word_len)
                && chars.get(i + 1).is_some_and(|n| n.is_alphabetic());
            if elision {
                word.push(c);
                flush(&mut word, &mut out, &mut space);
            } else {
                flush(&mut word, &mut out, &mut space);
                out.push(PreToken {
                    text: c.to_string(),
                    space_before: space,
                });
                space = false;
            }
            word_len = 0;
            word_letters_only = true;
        }
        flush(&mut word, &mut out, &mut space);
    }
    out
}

fn word_symbols(token: &PreToken) -> Vec<String> {
    let mut symbols = Vec::with_capacity(token.text.chars().count() + 1);
    if token.space_before {
        symbols.push(SPACE_MARK.to_string());
    }
    symbols.extend(token.text.chars().map(|c| c.to_string()));
    symbols
}

/// Token ids plus the end offsets of each sentence they came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub sentence_ends: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    lookup: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    /// Set when training ran out of merges before the requested size.
    pub undersized: bool,
}

impl TokenizerModel {
    fn from_parts(vocab: Vec<String>, merges: Vec<(String, String)>, undersized: bool) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!("vocabulary id {i} must be the special token {s}")));
            }
        }
        let mut lookup = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if lookup.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, (l, r)) in merges.iter().enumerate() {
            if !lookup.contains_key(&format!("{l}{r}")) {
                return Err(Error::Format(format!("merge {l:?} + {r:?} has no vocabulary entry")));
            }
            ranks.insert((l.clone(), r.clone()), i);
        }
        Ok(Self {
            vocab,
            merges,
            lookup,
            ranks,
            undersized,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    fn encode_word(&self, token: &PreToken, out: &mut Vec<usize>) {
        let mut symbols = word_symbols(token);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols.splice(i..i + 2, [merged]);
        }
        out.extend(symbols.iter().map(|s| self.token_id(s).unwrap_or(UNK)));
    }

    /// Normalizes, pre-tokenizes and applies merges in training order.
    /// Symbols never seen in training map to [`UNK`].
    pub fn encode(&self, text: &str) -> TokenSequence {
        let normalized = normalize(text);
        let mut ids = Vec::new();
        for token in pretokenize_spaced(&normalized) {
            self.encode_word(&token, &mut ids);
        }
        let sentence_ends = if ids.is_empty() { Vec::new() } else { vec![ids.len()] };
        TokenSequence { ids, sentence_ends }
    }

    /// Concatenates token strings, turning space marks back into spaces.
    /// Special tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIAL_TOKENS.len())
            .filter_map(|&i| self.vocab.get(i))
            .flat_map(|t| t.chars())
            .map(|c| if c == SPACE_MARK { ' ' } else { c })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = String::from(FILE_HEADER);
        vocab.push('\n');
        for t in &self.vocab {
            vocab.push_str(t);
            vocab.push('\n');
        }
        let path = dir.join(VOCAB_FILE);
        fs::write(&path, vocab).map_err(|e| Error::io(&path, e))?;
        let mut merges = String::from(FILE_HEADER);
        merges.push('\n');
        for (l, r) in &self.merges {
            merges.push_str(&format!("{l} {r}\n"));
        }
        let path = dir.join(MERGES_FILE);
        fs::write(&path, merges).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut lines = text.lines();
            if lines.next() != Some(FILE_HEADER) {
                return Err(Error::Format(format!("{} lacks the {FILE_HEADER:?} header", path.display())));
            }
            Ok(lines.map(str::to_string).collect())
        };
        let vocab = read(VOCAB_FILE)?;
        let merges = read(MERGES_FILE)?
            .into_iter()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::Format(format!("malformed merge line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenizerModel::from_parts(vocab, merges, false)
    }
}

type Pair = (u32, u32);

/// Greedy BPE training. Each round merges the most frequent adjacent pair;
/// ties go to the lexicographically smallest merged string, then the
/// smallest (left, right). Base symbols are sorted, so the result does not
/// depend on corpus line order.
pub fn train_bpe<I, S>(corpus: I, target_vocab: usize) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<Vec<String>, u64> = HashMap::new();
    let mut any = false;
    for line in corpus {
        let normalized = normalize(line.as_ref());
        for token in pretokenize_spaced(&normalized) {
            any = true;
            *word_counts.entry(word_symbols(&token)).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Input("tokenizer corpus is empty".into()));
    }
    let mut base: Vec<String> = word_counts
        .keys()
        .flatten()
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    base.sort();
    if target_vocab <= SPECIAL_TOKENS.len() + base.len() {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab} must exceed {} specials plus {} base symbols",
            SPECIAL_TOKENS.len(),
            base.len()
        )));
    }

    let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    vocab.extend(base);
    let mut ids: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

    // Unique words in a canonical order keep pair bookkeeping deterministic.
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(syms, n)| (syms.iter().map(|s| ids[s]).collect(), n))
        .collect();
    words.sort();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (w, (syms, n)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += *n as i64;
            pair_words.entry((p[0], p[1])).or_default().insert(w);
        }
    }

    let mut merges = Vec::new();
    let mut undersized = false;
    while vocab.len() < target_vocab {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&(l, r), &c)| (c, format!("{}{}", vocab[l as usize], vocab[r as usize]), l, r))
            .min_by(|a, b| {
                b.0.cmp(&a.0)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| vocab[a.2 as usize].cmp(&vocab[b.2 as usize]))
                    .then_with(|| vocab[a.3 as usize].cmp(&vocab[b.3 as usize]))
            });
        let Some((_, merged, left, right)) = best else {
            undersized = true;
            break;
        };
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged.clone());
                ids.insert(merged, id);
                id
            }
        };
        merges.push((vocab[left as usize].clone(), vocab[right as usize].clone()));

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_words.remove(&(left, right)).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        pair_counts.remove(&(left, right));
        for w in affected {
            let (syms, n) = &mut words[w];
            let n = *n as i64;
            for p in syms.windows(2) {
                if let Some(c) = pair_counts.get_mut(&(p[0], p[1])) {
                    *c -= n;
                }
            }
            let mut merged_syms = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    merged_syms.push(new_id);
                    i += 2;
                } else {
                    merged_syms.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged_syms;
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += n;
                pair_words.entry((p[0], p[1])).or_default().insert(w);
            }
        }
    }
    TokenizerModel::from_parts(vocab, merges, undersized)
}
