//! BM25 prefilter: reduce the full candidate corpus to a pool worth scoring.
//!
//! Okapi BM25 with the +1-inside-log IDF, which is strictly positive, so a
//! document scores zero against a query exactly when it shares no term with
//! it. Queries are unique-term: repeated words in a task text do not
//! double-count.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, TaskExample};
use crate::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Immutable inverted index over a tokenized corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    /// term id -> postings (doc index ascending, term frequency).
    postings: HashMap<u32, Vec<(u32, u32)>>,
    #[serde(skip)]
    id_to_idx: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.id_to_idx.get(doc_id).map(|&i| self.doc_len[i])
    }

    /// Document frequency of a term.
    pub fn df(&self, term: u32) -> usize {
        self.postings.get(&term).map_or(0, |p| p.len())
    }

    /// Term frequency of `term` in a document.
    pub fn tf(&self, term: u32, doc_id: &str) -> Option<u32> {
        let idx = *self.id_to_idx.get(doc_id)? as u32;
        let postings = self.postings.get(&term)?;
        postings
            .binary_search_by_key(&idx, |&(d, _)| d)
            .ok()
            .map(|p| postings[p].1)
    }

    fn idf(&self, term: u32) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_doc_score(&self, idf: f64, tf: u32, doc_idx: usize) -> f64 {
        let k1 = self.params.k1;
        let b = self.params.b;
        let tf = tf as f64;
        let dl = self.doc_len[doc_idx] as f64;
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avgdl))
    }

    /// BM25 score of `query` against one document. Duplicated query terms
    /// contribute once.
    pub fn score(&self, query: &[u32], doc_id: &str) -> Result<f64> {
        let idx = *self
            .id_to_idx
            .get(doc_id)
            .ok_or_else(|| Error::Validation(format!("unknown doc id {doc_id}")))?;
        let unique: BTreeSet<u32> = query.iter().copied().collect();
        let mut total = 0.0;
        for term in unique {
            if let Some(tf) = self.tf(term, doc_id) {
                total += self.term_doc_score(self.idf(term), tf, idx);
            }
        }
        Ok(total)
    }

    /// Scores of `query` against every document sharing at least one term,
    /// as (doc index, score) with score > 0.
    fn matches(&self, query: &[u32]) -> Vec<(usize, f64)> {
        let unique: BTreeSet<u32> = query.iter().copied().collect();
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for term in unique {
            if let Some(postings) = self.postings.get(&term) {
                let idf = self.idf(term);
                for &(doc_idx, tf) in postings {
                    *acc.entry(doc_idx as usize).or_insert(0.0) +=
                        self.term_doc_score(idf, tf, doc_idx as usize);
                }
            }
        }
        acc.into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Bm25Index> {
        let mut index: Bm25Index = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("bad index file: {e}")))?;
        index.id_to_idx = index
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(index)
    }
}

/// Build the index. Statistics exactly mirror the corpus; rebuilding from
/// the same documents yields an identical index.
pub fn build_index(docs: &[Document], params: Bm25Params) -> Result<Bm25Index> {
    if docs.is_empty() {
        return Err(Error::Validation("cannot index an empty corpus".to_string()));
    }
    if !(params.k1 > 0.0) {
        return Err(Error::Validation(format!("k1 must be > 0, got {}", params.k1)));
    }
    if !(0.0..=1.0).contains(&params.b) {
        return Err(Error::Validation(format!("b must be in [0, 1], got {}", params.b)));
    }

    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut doc_len = Vec::with_capacity(docs.len());
    let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for (idx, doc) in docs.iter().enumerate() {
        doc_ids.push(doc.id.clone());
        doc_len.push(doc.tokens.len() as u32);
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for &t in &doc.tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push((idx as u32, tf));
        }
    }
    for plist in postings.values_mut() {
        plist.sort_unstable_by_key(|&(d, _)| d);
    }
    let avgdl = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
    let id_to_idx = doc_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    Ok(Bm25Index {
        params,
        doc_ids,
        doc_len,
        avgdl,
        postings,
        id_to_idx,
    })
}

/// A pooled candidate with the best score it achieved across queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub best_score: f64,
}

/// For each task example, rank documents by BM25 with the example's tokens
/// as the query and keep the per-query top `top_n` positive scorers; return
/// the union ordered by (best score descending, id ascending).
pub fn retrieve_candidates(
    index: &Bm25Index,
    queries: &[TaskExample],
    top_n: usize,
) -> Result<Vec<PoolEntry>> {
    if top_n == 0 {
        return Err(Error::Validation("top_n must be >= 1".to_string()));
    }
    let mut best: HashMap<usize, f64> = HashMap::new();
    for query in queries {
        let mut scored = index.matches(&query.tokens);
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| index.doc_ids[a.0].cmp(&index.doc_ids[b.0]))
        });
        scored.truncate(top_n);
        for (idx, score) in scored {
            let entry = best.entry(idx).or_insert(f64::NEG_INFINITY);
            if score > *entry {
                *entry = score;
            }
        }
    }
    let mut pool: Vec<PoolEntry> = best
        .into_iter()
        .map(|(idx, score)| PoolEntry {
            id: index.doc_ids[idx].clone(),
            best_score: score,
        })
        .collect();
    pool.sort_by(|a, b| {
        b.best_score
            .partial_cmp(&a.best_score)
            .expect("finite scores")
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(pool)
}
