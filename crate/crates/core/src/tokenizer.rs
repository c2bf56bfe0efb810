//! Byte-pair encoding over a byte-level base alphabet, plus the simple word
//! splitter used for corpus statistics.
//!
//! The base alphabet is the 256 raw bytes, so any UTF-8 string encodes with
//! no out-of-vocabulary failures and `decode(encode(s)) == s` holds exactly.
//! Merges are learned most-frequent-pair-first with ties broken by
//! lexicographic order of the pair, making training deterministic.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no non-empty lines")]
    EmptyCorpus,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed tokenizer model: {0}")]
    Parse(String),
    #[error("token ids do not decode to valid UTF-8")]
    InvalidUtf8,
    #[error("token id {0} out of range for vocabulary of {1}")]
    UnknownId(u32, usize),
}

/// Fixed special-token ids, reserved at the front of every vocabulary.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const MASK: u32 = 4;
    pub const COUNT: usize = 5;

    pub const NAMES: [(&str, u32); 5] = [
        ("pad", PAD),
        ("unk", UNK),
        ("bos", BOS),
        ("eos", EOS),
        ("mask", MASK),
    ];
}

const BYTE_BASE: u32 = special::COUNT as u32;
const VERSION: &str = "bpe-v1";

/// Token ids for one piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Length of the source text in characters.
    pub source_chars: usize,
}

/// Ordered merge rules plus the token <-> id vocabulary they induce.
#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    vocab: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, u32>,
}

impl BpeModel {
    fn with_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Self {
        let mut vocab: Vec<Vec<u8>> = Vec::with_capacity(special::COUNT + 256 + merges.len());
        for (name, _) in special::NAMES {
            vocab.push(format!("<{name}>").into_bytes());
        }
        for b in 0..=255u8 {
            vocab.push(vec![b]);
        }
        for (l, r) in &merges {
            let mut tok = l.clone();
            tok.extend_from_slice(r);
            vocab.push(tok);
        }
        let ids = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { merges, vocab, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn version(&self) -> &'static str {
        VERSION
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < BYTE_BASE
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    /// Greedy application of the learned merges in training order over the
    /// byte-level symbols of `text`. Never fails on any UTF-8 input.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq: Vec<u32> = text.bytes().map(|b| BYTE_BASE + b as u32).collect();
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            let lid = self.ids[l];
            let rid = self.ids[r];
            let mid = (BYTE_BASE as usize + 256 + rank) as u32;
            seq = apply_merge(&seq, lid, rid, mid);
        }
        TokenSequence {
            ids: seq,
            source_chars: text.chars().count(),
        }
    }

    /// Inverse of [`encode`](Self::encode). Special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(TokenizerError::UnknownId(id, self.vocab.len()));
            }
            if self.is_special(id) {
                continue;
            }
            bytes.extend_from_slice(&self.vocab[id as usize]);
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// Serialize to the `bpe-v1` text format. Bit-exact round-trip with
    /// [`BpeModel::from_reader_str`].
    pub fn to_model_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{VERSION} {} {}", self.merges.len(), self.vocab.len()).unwrap();
        for (l, r) in &self.merges {
            writeln!(out, "{} {}", escape(l), escape(r)).unwrap();
        }
        for (name, id) in special::NAMES {
            writeln!(out, "special {name} {id}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_model_string()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_reader_str(contents: &str) -> Result<Self, TokenizerError> {
        let mut lines = contents.lines();
        let header = lines.next().ok_or_else(|| TokenizerError::Parse("empty file".into()))?;
        let mut parts = header.split(' ');
        let version = parts.next().unwrap_or_default();
        if version != VERSION {
            return Err(TokenizerError::Parse(format!("unsupported version '{version}'")));
        }
        let num_merges: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TokenizerError::Parse("bad merge count in header".into()))?;
        let vocab_size: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TokenizerError::Parse("bad vocab size in header".into()))?;

        let mut merges = Vec::with_capacity(num_merges);
        for i in 0..num_merges {
            let line = lines
                .next()
                .ok_or_else(|| TokenizerError::Parse(format!("missing merge line {i}")))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| TokenizerError::Parse(format!("merge line {i} lacks a separator")))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        for (name, id) in special::NAMES {
            let line = lines
                .next()
                .ok_or_else(|| TokenizerError::Parse(format!("missing special entry '{name}'")))?;
            let expected = format!("special {name} {id}");
            if line != expected {
                return Err(TokenizerError::Parse(format!(
                    "special table mismatch: expected '{expected}', got '{line}'"
                )));
            }
        }
        let model = Self::with_merges(merges);
        if model.vocab_size() != vocab_size {
            return Err(TokenizerError::Parse(format!(
                "header claims vocab {vocab_size}, merges imply {}",
                model.vocab_size()
            )));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let contents = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader_str(&contents)
    }
}

/// Replace every non-overlapping adjacent `(l, r)` with `m`, left to right.
fn apply_merge(seq: &[u32], l: u32, r: u32, m: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut j = 0;
    while j < seq.len() {
        if j + 1 < seq.len() && seq[j] == l && seq[j + 1] == r {
            out.push(m);
            j += 2;
        } else {
            out.push(seq[j]);
            j += 1;
        }
    }
    out
}

/// Learn `num_merges` byte-pair merges from an iterator of text lines.
///
/// Each step merges the most frequent adjacent symbol pair; ties break by
/// lexicographic order of the pair's byte strings. Stops early when no
/// adjacent pair remains.
pub fn train_bpe<I, S>(corpus: I, num_merges: usize) -> Result<BpeModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut lines: Vec<Vec<u32>> = Vec::new();
    let mut non_empty = false;
    for line in corpus {
        let line = line.as_ref();
        if !line.trim().is_empty() {
            non_empty = true;
        }
        if !line.is_empty() {
            lines.push(line.bytes().map(|b| BYTE_BASE + b as u32).collect());
        }
    }
    if !non_empty {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Token bytes per id, extended as merges mint new symbols.
    let mut token_bytes: Vec<Vec<u8>> = Vec::with_capacity(special::COUNT + 256 + num_merges);
    for (name, _) in special::NAMES {
        token_bytes.push(format!("<{name}>").into_bytes());
    }
    for b in 0..=255u8 {
        token_bytes.push(vec![b]);
    }

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for line in &lines {
        for w in line.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }

    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for _ in 0..num_merges {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Higher count wins; among equals the lexicographically
                    // smaller pair wins, so compare keys in reverse.
                    let ka = (&token_bytes[pa.0 as usize], &token_bytes[pa.1 as usize]);
                    let kb = (&token_bytes[pb.0 as usize], &token_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&pair, _)| pair);
        let Some((l, r)) = best else { break };

        let mut merged = token_bytes[l as usize].clone();
        merged.extend_from_slice(&token_bytes[r as usize]);
        let m = token_bytes.len() as u32;
        token_bytes.push(merged);
        merges.push((token_bytes[l as usize].clone(), token_bytes[r as usize].clone()));

        // Rewrite lines, updating pair counts incrementally around each
        // replacement site.
        for line in lines.iter_mut() {
            if line.len() < 2 {
                continue;
            }
            let old = std::mem::take(line);
            let mut new = Vec::with_capacity(old.len());
            let mut j = 0;
            while j < old.len() {
                if j + 1 < old.len() && old[j] == l && old[j + 1] == r {
                    *counts.entry((l, r)).or_insert(0) -= 1;
                    if let Some(&prev) = new.last() {
                        *counts.entry((prev, l)).or_insert(0) -= 1;
                        *counts.entry((prev, m)).or_insert(0) += 1;
                    }
                    if j + 2 < old.len() {
                        *counts.entry((r, old[j + 2])).or_insert(0) -= 1;
                        *counts.entry((m, old[j + 2])).or_insert(0) += 1;
                    }
                    new.push(m);
                    j += 2;
                } else {
                    new.push(old[j]);
                    j += 1;
                }
            }
            *line = new;
        }
        counts.remove(&(l, r));
    }

    Ok(BpeModel::with_merges(merges))
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            0x21..=0x7e => out.push(b as char),
            _ => {
                write!(out, "\\x{b:02x}").unwrap();
            }
        }
    }
    out
}

fn unescape(s: &str) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c as u8);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('x') => {
                let hi = chars.next().ok_or_else(|| TokenizerError::Parse("truncated \\x escape".into()))?;
                let lo = chars.next().ok_or_else(|| TokenizerError::Parse("truncated \\x escape".into()))?;
                let byte = u8::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| TokenizerError::Parse(format!("bad hex escape \\x{hi}{lo}")))?;
                out.push(byte);
            }
            other => return Err(TokenizerError::Parse(format!("bad escape '\\{other:?}'"))),
        }
    }
    Ok(out)
}

fn is_word_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Split on Unicode whitespace and detach leading/trailing punctuation as
/// separate tokens. Intra-word punctuation (hyphens, apostrophes) is kept.
/// A simplified stand-in for a full tokenizer, used only for statistics.
pub fn word_split(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_word_punct(chars[start]) {
            start += 1;
        }
        while end > start && is_word_punct(chars[end - 1]) {
            end -= 1;
        }
        for &c in &chars[..start] {
            tokens.push(c.to_string());
        }
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}
