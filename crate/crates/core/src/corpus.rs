//! Labeled dataset ingestion, deterministic shuffle/split, and corpus
//! statistics (token counts, vocabulary overlap, per-class top words).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tokenizer::word_split;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("row {row}: not valid UTF-8")]
    Encoding { row: usize },
    #[error("missing column '{field}' in header")]
    MissingColumn { field: String },
    #[error("row {row}: missing field '{field}'")]
    MissingField { field: String, row: usize },
    #[error("row {row}: article text is empty")]
    EmptyArticle { row: usize },
    #[error("row {row}: unknown label '{value}' (expected real/fake/0/1)")]
    UnknownLabel { row: usize, value: String },
    #[error("row {row}: malformed record: {detail}")]
    Malformed { row: usize, detail: String },
    #[error("cannot split {n} documents at fraction {fraction}: a side would be empty")]
    DegenerateSplit { n: usize, fraction: f64 },
    #[error("need at least 2 documents to split, got {0}")]
    TooFewDocuments(usize),
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

/// One article: UTF-8 text plus an optional binary label (absent for
/// unlabeled pretraining text).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDocument {
    pub id: String,
    pub text: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Tsv,
    Jsonl,
}

fn parse_label(raw: &str, row: usize) -> Result<Label, CorpusError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "real" => Ok(Label::Real),
        "1" | "fake" => Ok(Label::Fake),
        _ => Err(CorpusError::UnknownLabel {
            row,
            value: raw.to_string(),
        }),
    }
}

/// Load a labeled dataset. Rows must carry `label` and `article` fields;
/// labels normalize as {0, real, REAL} -> real and {1, fake, FAKE} -> fake.
/// Documents come back in file order with 1-based row ids.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<LabeledDocument>, CorpusError> {
    match format {
        DataFormat::Csv => load_delimited(path, b','),
        DataFormat::Tsv => load_delimited(path, b'\t'),
        DataFormat::Jsonl => load_jsonl(path),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_delimited(path: &Path, delimiter: u8) -> Result<Vec<LabeledDocument>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            row: 0,
            detail: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| CorpusError::MissingColumn {
                field: name.to_string(),
            })
    };
    let label_col = col("label")?;
    let article_col = col("article")?;

    let mut docs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::Utf8 { .. } => CorpusError::Encoding { row },
            _ => CorpusError::Malformed {
                row,
                detail: e.to_string(),
            },
        })?;
        let label_raw = record.get(label_col).ok_or_else(|| CorpusError::MissingField {
            field: "label".into(),
            row,
        })?;
        let article = record.get(article_col).ok_or_else(|| CorpusError::MissingField {
            field: "article".into(),
            row,
        })?;
        if article.trim().is_empty() {
            return Err(CorpusError::EmptyArticle { row });
        }
        docs.push(LabeledDocument {
            id: row.to_string(),
            text: article.to_string(),
            label: Some(parse_label(label_raw, row)?),
        });
    }
    Ok(docs)
}

fn load_jsonl(path: &Path) -> Result<Vec<LabeledDocument>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let contents = String::from_utf8(bytes).map_err(|_| CorpusError::Encoding { row: 0 })?;
    let mut docs = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                row,
                detail: e.to_string(),
            })?;
        let label_raw = match value.get("label") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => {
                return Err(CorpusError::MissingField {
                    field: "label".into(),
                    row,
                })
            }
        };
        let article = value
            .get("article")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CorpusError::MissingField {
                field: "article".into(),
                row,
            })?;
        if article.trim().is_empty() {
            return Err(CorpusError::EmptyArticle { row });
        }
        docs.push(LabeledDocument {
            id: row.to_string(),
            text: article.to_string(),
            label: Some(parse_label(&label_raw, row)?),
        });
    }
    Ok(docs)
}

/// Load unlabeled pretraining text: one document per non-empty line.
pub fn load_text_corpus(path: &Path) -> Result<Vec<LabeledDocument>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let contents = String::from_utf8(bytes).map_err(|_| CorpusError::Encoding { row: 0 })?;
    Ok(contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LabeledDocument {
            id: (i + 1).to_string(),
            text: l.to_string(),
            label: None,
        })
        .collect())
}

/// Deterministic train/test partition of a document list.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledDocument>,
    pub test: Vec<LabeledDocument>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Fisher-Yates shuffle driven by `RngStream(seed)`, then the first
/// `floor(train_fraction * N)` documents form the train side.
pub fn shuffle_split(
    docs: &[LabeledDocument],
    seed: u64,
    train_fraction: f64,
) -> Result<DatasetSplit, CorpusError> {
    if docs.len() < 2 {
        return Err(CorpusError::TooFewDocuments(docs.len()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let n_train = (train_fraction * docs.len() as f64).floor() as usize;
    if n_train == 0 || n_train == docs.len() {
        return Err(CorpusError::DegenerateSplit {
            n: docs.len(),
            fraction: train_fraction,
        });
    }
    let mut shuffled: Vec<LabeledDocument> = docs.to_vec();
    let mut rng = RngStream::new(seed);
    rng.shuffle(&mut shuffled);
    let test = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        test,
        seed,
        train_fraction,
    })
}

/// Aggregate token statistics, optionally with an out-of-vocabulary count
/// against a reference vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub tokens: usize,
    pub unique_tokens: usize,
    pub oov_tokens: Option<usize>,
    pub oov_pct: Option<f64>,
}

/// Count tokens via [`word_split`]. Words compare case-sensitively. When a
/// reference vocabulary is given, `oov_tokens` counts distinct measured words
/// absent from it and `oov_pct` is that count relative to the measured
/// unique-token count.
pub fn compute_stats(docs: &[LabeledDocument], reference_vocab: Option<&HashSet<String>>) -> CorpusStats {
    let mut tokens = 0usize;
    let mut unique: HashSet<String> = HashSet::new();
    for doc in docs {
        for word in word_split(&doc.text) {
            tokens += 1;
            unique.insert(word);
        }
    }
    let unique_tokens = unique.len();
    let (oov_tokens, oov_pct) = match reference_vocab {
        Some(reference) => {
            let oov = unique.iter().filter(|w| !reference.contains(*w)).count();
            let pct = if unique_tokens == 0 {
                0.0
            } else {
                100.0 * oov as f64 / unique_tokens as f64
            };
            (Some(oov), Some(pct))
        }
        None => (None, None),
    };
    CorpusStats {
        documents: docs.len(),
        tokens,
        unique_tokens,
        oov_tokens,
        oov_pct,
    }
}

/// Distinct words across a document list.
pub fn vocabulary(docs: &[LabeledDocument]) -> HashSet<String> {
    let mut vocab = HashSet::new();
    for doc in docs {
        vocab.extend(word_split(&doc.text));
    }
    vocab
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopWordsMode {
    PerClass,
    ClassExclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordCount {
    pub word: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFrequencies {
    pub label: Label,
    pub words: Vec<WordCount>,
}

/// Ranked word frequencies per class. Counts are non-increasing; ties break
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyTable {
    pub mode: TopWordsMode,
    pub classes: Vec<ClassFrequencies>,
}

fn class_counts(docs: &[LabeledDocument]) -> BTreeMap<&'static str, HashMap<String, usize>> {
    let mut counts: BTreeMap<&'static str, HashMap<String, usize>> = BTreeMap::new();
    for doc in docs {
        let Some(label) = doc.label else { continue };
        let entry = counts.entry(label.as_str()).or_default();
        for word in word_split(&doc.text) {
            *entry.entry(word).or_insert(0) += 1;
        }
    }
    counts
}

fn top_k(counts: &HashMap<String, usize>, k: usize) -> Vec<WordCount> {
    let mut pairs: Vec<(&String, &usize)> = counts.iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    pairs
        .into_iter()
        .take(k)
        .map(|(w, &c)| WordCount {
            word: w.clone(),
            count: c,
        })
        .collect()
}

/// Most frequent words per class (`PerClass`) or most frequent words that
/// occur in exactly one class (`ClassExclusive`). `k` larger than the
/// vocabulary returns the full ranked list.
pub fn top_words(docs: &[LabeledDocument], k: usize, mode: TopWordsMode) -> FrequencyTable {
    let by_class = class_counts(docs);
    let labels = [Label::Real, Label::Fake];
    let mut classes = Vec::new();
    for label in labels {
        let Some(counts) = by_class.get(label.as_str()) else {
            continue;
        };
        let other_vocab: HashSet<&String> = labels
            .iter()
            .filter(|l| **l != label)
            .filter_map(|l| by_class.get(l.as_str()))
            .flat_map(|m| m.keys())
            .collect();
        let filtered: HashMap<String, usize> = match mode {
            TopWordsMode::PerClass => counts.clone(),
            TopWordsMode::ClassExclusive => counts
                .iter()
                .filter(|(w, _)| !other_vocab.contains(w))
                .map(|(w, &c)| (w.clone(), c))
                .collect(),
        };
        classes.push(ClassFrequencies {
            label,
            words: top_k(&filtered, k),
        });
    }
    FrequencyTable { mode, classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str, label: Option<Label>) -> LabeledDocument {
        LabeledDocument {
            id: id.into(),
            text: text.into(),
            label,
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let docs: Vec<_> = (0..10).map(|i| doc(&i.to_string(), "x", Some(Label::Real))).collect();
        let split = shuffle_split(&docs, 42, 0.7).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn split_matches_published_sizes_at_full_scale() {
        let docs: Vec<_> = (0..3206).map(|i| doc(&i.to_string(), "x", Some(Label::Fake))).collect();
        let split = shuffle_split(&docs, 42, 0.7).unwrap();
        assert_eq!(split.train.len(), 2244);
        assert_eq!(split.test.len(), 962);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let docs: Vec<_> = (0..57).map(|i| doc(&i.to_string(), "x", Some(Label::Real))).collect();
        let a = shuffle_split(&docs, 42, 0.7).unwrap();
        let b = shuffle_split(&docs, 42, 0.7).unwrap();
        let ids = |v: &[LabeledDocument]| v.iter().map(|d| d.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));

        let mut union: Vec<String> = ids(&a.train);
        union.extend(ids(&a.test));
        union.sort();
        let mut input: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        input.sort();
        assert_eq!(union, input);
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let docs: Vec<_> = (0..3).map(|i| doc(&i.to_string(), "x", Some(Label::Real))).collect();
        assert!(matches!(
            shuffle_split(&docs, 1, 0.1),
            Err(CorpusError::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn toy_stats_match_hand_count() {
        // docs = ["a b b", "a c"], reference {a, b}:
        // tokens 5, unique 3 ({a, b, c}), OOV 1 ({c}) = 33.33% of unique.
        let docs = vec![
            doc("1", "a b b", Some(Label::Real)),
            doc("2", "a c", Some(Label::Fake)),
        ];
        let reference: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let stats = compute_stats(&docs, Some(&reference));
        assert_eq!(stats.documents, 2);
        assert_eq!(stats.tokens, 5);
        assert_eq!(stats.unique_tokens, 3);
        assert_eq!(stats.oov_tokens, Some(1));
        let pct = stats.oov_pct.unwrap();
        assert!((pct - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_doc_list_gives_zero_stats() {
        let stats = compute_stats(&[], None);
        assert_eq!(stats.documents, 0);
        assert_eq!(stats.tokens, 0);
        assert_eq!(stats.unique_tokens, 0);
        assert_eq!(stats.oov_tokens, None);
    }

    #[test]
    fn stats_are_order_invariant() {
        let a = vec![doc("1", "x y", Some(Label::Real)), doc("2", "z", Some(Label::Fake))];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_eq!(compute_stats(&a, None), compute_stats(&b, None));
    }

    #[test]
    fn top_words_hand_example_with_tie_break() {
        // real: "x x y" -> [(x, 2)]; fake: "x z" -> tie, lexicographic: x.
        let docs = vec![
            doc("1", "x x y", Some(Label::Real)),
            doc("2", "x z", Some(Label::Fake)),
        ];
        let table = top_words(&docs, 1, TopWordsMode::PerClass);
        let real = &table.classes[0];
        assert_eq!(real.label, Label::Real);
        assert_eq!(real.words, vec![WordCount { word: "x".into(), count: 2 }]);
        let fake = &table.classes[1];
        assert_eq!(fake.words, vec![WordCount { word: "x".into(), count: 1 }]);
    }

    #[test]
    fn top_words_k_beyond_vocab_returns_full_list() {
        let docs = vec![doc("1", "a b", Some(Label::Real))];
        let table = top_words(&docs, 100, TopWordsMode::PerClass);
        assert_eq!(table.classes[0].words.len(), 2);
    }

    #[test]
    fn class_exclusive_drops_shared_words() {
        let docs = vec![
            doc("1", "shared only_real", Some(Label::Real)),
            doc("2", "shared only_fake only_fake", Some(Label::Fake)),
        ];
        let table = top_words(&docs, 5, TopWordsMode::ClassExclusive);
        let fake = table.classes.iter().find(|c| c.label == Label::Fake).unwrap();
        assert_eq!(fake.words, vec![WordCount { word: "only_fake".into(), count: 2 }]);
        let real = table.classes.iter().find(|c| c.label == Label::Real).unwrap();
        assert_eq!(real.words, vec![WordCount { word: "only_real".into(), count: 1 }]);
    }

    #[test]
    fn loader_reads_two_row_csv() {
        let dir = std::env::temp_dir().join(format!("corpus_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two.csv");
        fs::write(&path, "label,article\nreal,totoong balita ito\nfake,gawa-gawang balita\n").unwrap();
        let docs = load_dataset(&path, DataFormat::Csv).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].label, Some(Label::Real));
        assert_eq!(docs[1].label, Some(Label::Fake));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_cites_row_for_missing_article() {
        let dir = std::env::temp_dir().join(format!("corpus_test_missing_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        fs::write(&path, "label,article\nreal,ok na balita\nfake\n").unwrap();
        let err = load_dataset(&path, DataFormat::Csv).unwrap_err();
        match err {
            CorpusError::MissingField { field, row } => {
                assert_eq!(field, "article");
                assert_eq!(row, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_rejects_unknown_label() {
        let dir = std::env::temp_dir().join(format!("corpus_test_label_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_label.csv");
        fs::write(&path, "label,article\nmaybe,alinlangan\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DataFormat::Csv),
            Err(CorpusError::UnknownLabel { row: 1, .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn jsonl_loader_accepts_numeric_labels() {
        let dir = std::env::temp_dir().join(format!("corpus_test_jsonl_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.jsonl");
        fs::write(
            &path,
            "{\"label\": 0, \"article\": \"tunay\"}\n{\"label\": 1, \"article\": \"peke\"}\n",
        )
        .unwrap();
        let docs = load_dataset(&path, DataFormat::Jsonl).unwrap();
        assert_eq!(docs[0].label, Some(Label::Real));
        assert_eq!(docs[1].label, Some(Label::Fake));
        fs::remove_dir_all(&dir).ok();
    }
}
