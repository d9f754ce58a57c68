//! Deterministic ingestion, tokenization, and vocabulary construction.
//!
//! Input files are JSON lines: candidate corpus records carry exactly
//! `{"id", "text"}`, task records `{"id", "text", "label"}`. Tokenization
//! is whitespace + punctuation stripping (no subwords), which keeps the
//! downstream numeric oracles exact and the vocabulary small.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::{Error, Result};

/// Reserved id for tokens missing from the vocabulary.
pub const UNK_ID: u32 = 0;
/// Reserved id used to blank out positions in masked-token prediction.
pub const MASK_ID: u32 = 1;
/// First id assigned to a real surface token.
pub const FIRST_WORD_ID: u32 = 2;

/// An unlabeled candidate document.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// A labeled end-task example; `label` indexes into a [`LabelMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing ASCII
/// punctuation from each piece, drop empty pieces. Pure and deterministic.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|piece| piece.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|piece| !piece.is_empty())
        .map(|piece| piece.to_string())
        .collect()
}

/// Token/id bimap with reserved UNK and MASK entries.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Number of ids, reserved entries included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Tokenize and map to ids; unknown tokens become [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// One `id<TAB>token` line per entry, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", id, tok));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary> {
        let mut id_to_token = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.splitn(2, '\t');
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("vocab line {}: bad id", lineno + 1)))?;
            let tok = parts
                .next()
                .ok_or_else(|| Error::Validation(format!("vocab line {}: missing token", lineno + 1)))?;
            if id != id_to_token.len() {
                return Err(Error::Validation(format!(
                    "vocab line {}: ids must be dense and ascending",
                    lineno + 1
                )));
            }
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(FIRST_WORD_ID as usize)
            .map(|(id, tok)| (tok.clone(), id as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// Build a vocabulary from surface texts. A token is kept when its total
/// count reaches `doc_min_freq`, or when its count within the task texts
/// alone reaches `task_min_freq` (so rare task-discriminative words survive
/// a stricter corpus threshold). Ids are assigned in descending total
/// frequency, ties broken lexicographically.
pub fn build_vocabulary<'a>(
    doc_texts: impl IntoIterator<Item = &'a str>,
    task_texts: impl IntoIterator<Item = &'a str>,
    doc_min_freq: u32,
    task_min_freq: u32,
) -> Result<Vocabulary> {
    let mut total: HashMap<String, u32> = HashMap::new();
    let mut task_only: HashMap<String, u32> = HashMap::new();
    for text in doc_texts {
        for tok in tokenize(text) {
            *total.entry(tok).or_insert(0) += 1;
        }
    }
    for text in task_texts {
        for tok in tokenize(text) {
            *total.entry(tok.clone()).or_insert(0) += 1;
            *task_only.entry(tok).or_insert(0) += 1;
        }
    }
    if total.is_empty() {
        return Err(Error::Validation("no tokens".to_string()));
    }

    let mut kept: Vec<(String, u32)> = total
        .into_iter()
        .filter(|(tok, count)| {
            *count >= doc_min_freq || task_only.get(tok).copied().unwrap_or(0) >= task_min_freq
        })
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token = vec!["[UNK]".to_string(), "[MASK]".to_string()];
    let mut token_to_id = HashMap::with_capacity(kept.len());
    for (tok, _) in kept {
        token_to_id.insert(tok.clone(), id_to_token.len() as u32);
        id_to_token.push(tok);
    }
    Ok(Vocabulary {
        token_to_id,
        id_to_token,
    })
}

/// First-seen-order mapping from label strings to category indices.
#[derive(Debug, Clone, Default)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, name: &str) -> usize {
        match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(|s| s.as_str())
    }

    /// Category count C.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{}\t{}\n", i, n))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<LabelMap> {
        let mut names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.splitn(2, '\t');
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("labels line {}: bad index", lineno + 1)))?;
            let name = parts.next().ok_or_else(|| {
                Error::Validation(format!("labels line {}: missing name", lineno + 1))
            })?;
            if idx != names.len() {
                return Err(Error::Validation(format!(
                    "labels line {}: indices must be dense and ascending",
                    lineno + 1
                )));
            }
            names.push(name.to_string());
        }
        Ok(LabelMap { names })
    }
}

/// Counts surfaced by ingestion for auditability.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub kept: usize,
    /// Records whose text tokenized to nothing; skipped, never kept silently.
    pub skipped_empty: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    id: String,
    text: String,
    label: String,
}

fn malformed(path: &Path, lineno: usize, err: impl std::fmt::Display) -> Error {
    Error::Validation(format!(
        "{}:{}: malformed line: {}",
        path.display(),
        lineno,
        err
    ))
}

/// Parse a corpus file into raw `(id, text)` records, checking id
/// uniqueness and line well-formedness. Used both for vocabulary
/// construction (which needs surface text) and ingestion.
pub fn read_corpus_records(path: &Path) -> Result<Vec<(String, String)>> {
    let content = crate::util::read_to_string(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        if seen.insert(rec.id.clone(), i).is_some() {
            return Err(Error::Validation(format!("duplicate id {}", rec.id)));
        }
        records.push((rec.id, rec.text));
    }
    Ok(records)
}

/// Parse a task file into raw `(id, text, label)` records.
pub fn read_task_records(path: &Path) -> Result<Vec<(String, String, String)>> {
    let content = crate::util::read_to_string(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        if seen.insert(rec.id.clone(), i).is_some() {
            return Err(Error::Validation(format!("duplicate id {}", rec.id)));
        }
        records.push((rec.id, rec.text, rec.label));
    }
    Ok(records)
}

/// Tokenize raw corpus records against a fixed vocabulary. Records that
/// tokenize to nothing are counted and skipped.
pub fn ingest_records(
    records: &[(String, String)],
    vocab: &Vocabulary,
) -> (Vec<Document>, IngestStats) {
    let mut docs = Vec::with_capacity(records.len());
    let mut stats = IngestStats::default();
    for (id, text) in records {
        let tokens = vocab.encode(text);
        if tokens.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        stats.kept += 1;
        docs.push(Document {
            id: id.clone(),
            text: text.clone(),
            tokens,
        });
    }
    (docs, stats)
}

/// Ingest a corpus file: documents in file order, unknown tokens mapped to
/// UNK, empty-after-tokenization records skipped with a surfaced count.
pub fn ingest_corpus(path: &Path, vocab: &Vocabulary) -> Result<(Vec<Document>, IngestStats)> {
    let records = read_corpus_records(path)?;
    Ok(ingest_records(&records, vocab))
}

/// Tokenize raw task records, mapping label strings through `labels` in
/// first-seen order.
pub fn ingest_task_records(
    records: &[(String, String, String)],
    vocab: &Vocabulary,
    labels: &mut LabelMap,
) -> (Vec<TaskExample>, IngestStats) {
    let mut examples = Vec::with_capacity(records.len());
    let mut stats = IngestStats::default();
    for (id, text, label) in records {
        let tokens = vocab.encode(text);
        if tokens.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        stats.kept += 1;
        examples.push(TaskExample {
            id: id.clone(),
            tokens,
            label: labels.get_or_insert(label),
        });
    }
    (examples, stats)
}

/// Ingest a task file against a fixed vocabulary and label map.
pub fn ingest_task(
    path: &Path,
    vocab: &Vocabulary,
    labels: &mut LabelMap,
) -> Result<(Vec<TaskExample>, IngestStats)> {
    let records = read_task_records(path)?;
    Ok(ingest_task_records(&records, vocab, labels))
}
