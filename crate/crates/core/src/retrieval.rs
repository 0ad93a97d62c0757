//! Okapi BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};

/// Version tag written into serialized index files.
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// The text that gets indexed: title and body.
    pub fn indexed_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("query {0:?} has no searchable terms")]
    EmptyQuery(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported index format version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// `(doc ordinal, term frequency)`; postings are sorted by ordinal.
pub type Posting = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub version: u32,
    pub params: Bm25Params,
    pub doc_count: usize,
    pub avg_doc_length: f64,
    pub doc_lengths: Vec<u32>,
    pub documents: Vec<Document>,
    pub postings: BTreeMap<String, Vec<Posting>>,
    #[serde(skip)]
    by_id: HashMap<String, u32>,
}

pub fn build_index(
    docs: impl IntoIterator<Item = Document>,
    params: Bm25Params,
) -> Result<RetrievalIndex, RetrievalError> {
    let mut documents = Vec::new();
    let mut by_id = HashMap::new();
    let mut doc_lengths = Vec::new();
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    for doc in docs {
        if doc.text.trim().is_empty() {
            return Err(RetrievalError::EmptyDocument(doc.id));
        }
        let ord = documents.len() as u32;
        if by_id.insert(doc.id.clone(), ord).is_some() {
            return Err(RetrievalError::DuplicateId(doc.id));
        }
        let terms = tokenize_text(&doc.indexed_text());
        doc_lengths.push(terms.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (term, f) in tf {
            postings.entry(term).or_default().push((ord, f));
        }
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let doc_count = documents.len();
    let avg_doc_length = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_count as f64;
    Ok(RetrievalIndex {
        version: INDEX_FORMAT_VERSION,
        params,
        doc_count,
        avg_doc_length,
        doc_lengths,
        documents,
        postings,
        by_id,
    })
}

/// Reads a JSONL corpus, one `{"id","title","text"}` object per line.
/// Blank lines are skipped; errors name the 1-based line number.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Document>, RetrievalError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

/// IDF with the +1 inside the logarithm, so it stays positive.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Saturated, length-normalized term-frequency factor.
pub fn tf_weight(tf: u32, doc_len: u32, avg_len: f64, params: Bm25Params) -> f64 {
    let f = tf as f64;
    let norm = if avg_len > 0.0 {
        doc_len as f64 / avg_len
    } else {
        0.0
    };
    f * (params.k1 + 1.0) / (f + params.k1 * (1.0 - params.b + params.b * norm))
}

impl RetrievalIndex {
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_frequency(&self, term: &str, ord: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| {
                p.binary_search_by_key(&ord, |&(o, _)| o)
                    .ok()
                    .map(|i| p[i].1)
            })
            .unwrap_or(0)
    }

    pub fn document_at(&self, ord: u32) -> Option<&Document> {
        self.documents.get(ord as usize)
    }

    pub fn ordinal(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let mut idx: RetrievalIndex =
            serde_json::from_str(text).map_err(|e| RetrievalError::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        if idx.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::Version(idx.version));
        }
        idx.by_id = idx
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i as u32))
            .collect();
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn term_contribution(&self, term: &str, tf: u32, ord: u32) -> f64 {
        idf(self.doc_count, self.doc_freq(term))
            * tf_weight(
                tf,
                self.doc_lengths[ord as usize],
                self.avg_doc_length,
                self.params,
            )
    }
}

/// BM25 score of one document for a tokenized query. Repeated query terms
/// contribute once per occurrence.
pub fn bm25_score(index: &RetrievalIndex, query_terms: &[String], ord: u32) -> f64 {
    let mut score = 0.0;
    for term in query_terms {
        let tf = index.term_frequency(term, ord);
        if tf > 0 {
            score += index.term_contribution(term, tf, ord);
        }
    }
    score
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub hits: Vec<Hit>,
}

/// Top-`k` documents by score, ties broken by ascending id. Documents
/// sharing no term with the query are never returned.
pub fn retrieve(
    index: &RetrievalIndex,
    query: &str,
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let terms = tokenize_text(query);
    if terms.is_empty() {
        return Err(RetrievalError::EmptyQuery(query.to_string()));
    }
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for term in &terms {
        if let Some(list) = index.postings.get(term) {
            for &(ord, tf) in list {
                *scores.entry(ord).or_insert(0.0) += index.term_contribution(term, tf, ord);
            }
        }
    }
    let mut hits: Vec<Hit> = scores
        .into_iter()
        .map(|(ord, score)| Hit {
            doc_id: index.documents[ord as usize].id.clone(),
            score,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    hits.truncate(k);
    Ok(RetrievalResult {
        query: query.to_string(),
        hits,
    })
}

/// Runs many queries against one index.
pub fn retrieve_batch(
    index: &RetrievalIndex,
    queries: &[String],
    k: usize,
    exec: Execution,
) -> Vec<Result<RetrievalResult, RetrievalError>> {
    par::map(exec, queries, |q| retrieve(index, q, k))
}

/// Source of evidence documents for the operators.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalResult, RetrievalError>;
    fn document(&self, id: &str) -> Option<&Document>;
}

impl Retriever for RetrievalIndex {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalResult, RetrievalError> {
        retrieve(self, query, k)
    }

    fn document(&self, id: &str) -> Option<&Document> {
        self.ordinal(id).and_then(|o| self.document_at(o))
    }
}
