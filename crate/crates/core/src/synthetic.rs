//! Synthetic two-style corpora for tests and demos.
//!
//! Sentences are random walks over a ring of syllabic pseudo-words. The
//! "real" style walks the ring forward, the "fake" style backward, with the
//! same unigram distribution either way; only word order separates the
//! classes, so a bag-of-words shortcut cannot solve the task. `fidelity`
//! controls how sharply the walk follows its direction.

use crate::corpus::{Label, LabeledDocument};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleDirection {
    Forward,
    Backward,
}

impl StyleDirection {
    pub fn label(self) -> Label {
        match self {
            StyleDirection::Forward => Label::Real,
            StyleDirection::Backward => Label::Fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    /// Ring size: number of distinct words.
    pub word_count: usize,
    /// Probability of following the style's direction at each step.
    pub fidelity: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            word_count: 24,
            fidelity: 0.85,
            min_len: 8,
            max_len: 14,
        }
    }
}

const SYLLABLES: [&str; 14] = [
    "ba", "ka", "da", "ga", "ha", "la", "ma", "na", "pa", "ra", "sa", "ta", "wa", "ya",
];

/// Deterministic surface form of word `i`.
pub fn word_form(i: usize) -> String {
    let first = SYLLABLES[(i / SYLLABLES.len()) % SYLLABLES.len()];
    let second = SYLLABLES[i % SYLLABLES.len()];
    format!("{first}{second}")
}

impl SyntheticTask {
    pub fn sentence(&self, direction: StyleDirection, rng: &mut RngStream) -> String {
        let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
        let k = self.word_count;
        let mut word = rng.below(k);
        let mut out = word_form(word);
        for _ in 1..len {
            word = if rng.bernoulli(self.fidelity) {
                match direction {
                    StyleDirection::Forward => (word + 1) % k,
                    StyleDirection::Backward => (word + k - 1) % k,
                }
            } else {
                rng.below(k)
            };
            out.push(' ');
            out.push_str(&word_form(word));
        }
        out
    }

    /// Balanced labeled documents: even indices are real (forward walks),
    /// odd indices fake (backward walks).
    pub fn labeled_docs(&self, n: usize, rng: &mut RngStream) -> Vec<LabeledDocument> {
        (0..n)
            .map(|i| {
                let dir = if i % 2 == 0 {
                    StyleDirection::Forward
                } else {
                    StyleDirection::Backward
                };
                LabeledDocument {
                    id: format!("synth-{i}"),
                    text: self.sentence(dir, rng),
                    label: Some(dir.label()),
                }
            })
            .collect()
    }

    /// Unlabeled pretraining text mixing both styles evenly.
    pub fn unlabeled_corpus(&self, n: usize, rng: &mut RngStream) -> Vec<LabeledDocument> {
        (0..n)
            .map(|i| {
                let dir = if i % 2 == 0 {
                    StyleDirection::Forward
                } else {
                    StyleDirection::Backward
                };
                LabeledDocument {
                    id: format!("corpus-{i}"),
                    text: self.sentence(dir, rng),
                    label: None,
                }
            })
            .collect()
    }
}
