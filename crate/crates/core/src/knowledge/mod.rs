//! Local lexical snippet store behind the retrieval augmentation agent.
//!
//! Snippets are indexed into an inverted index and ranked with Okapi BM25
//! (k1 = 1.2, b = 0.75) using the non-negative idf
//! `ln(1 + (N - n + 0.5) / (n + 0.5))`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;
/// Snippets injected into a retrieval augmentation prompt.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("duplicate snippet id {0}")]
    DuplicateId(String),
    #[error("snippet {0} has empty text")]
    EmptyText(String),
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSnippet {
    pub snippet: Snippet,
    pub score: f64,
}

/// Lower-cases and splits on anything that is not alphanumeric. A period
/// between two digits stays inside the token, so `6.5%` yields `6.5`.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if c == '.'
            && current.chars().last().is_some_and(|p| p.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
        {
            current.push('.');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, Default)]
pub struct SnippetIndex {
    snippets: BTreeMap<String, Snippet>,
    postings: BTreeMap<String, Vec<(String, u32)>>,
    doc_lengths: BTreeMap<String, usize>,
    total_length: usize,
}

impl SnippetIndex {
    pub fn doc_count(&self) -> usize {
        self.snippets.len()
    }

    pub fn postings(&self, token: &str) -> &[(String, u32)] {
        self.postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_length(&self, id: &str) -> Option<usize> {
        self.doc_lengths.get(id).copied()
    }

    pub fn snippet(&self, id: &str) -> Option<&Snippet> {
        self.snippets.get(id)
    }

    fn avg_doc_length(&self) -> f64 {
        if self.snippets.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.snippets.len() as f64
        }
    }
}

pub fn index_snippets(snippets: Vec<Snippet>) -> Result<SnippetIndex, KnowledgeError> {
    let mut index = SnippetIndex::default();
    for snippet in snippets {
        if snippet.text.trim().is_empty() {
            return Err(KnowledgeError::EmptyText(snippet.id));
        }
        if index.snippets.contains_key(&snippet.id) {
            return Err(KnowledgeError::DuplicateId(snippet.id));
        }
        let tokens = tokenize(&snippet.text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (token, count) in tf {
            index.postings.entry(token).or_default().push((snippet.id.clone(), count));
        }
        index.total_length += tokens.len();
        index.doc_lengths.insert(snippet.id.clone(), tokens.len());
        index.snippets.insert(snippet.id.clone(), snippet);
    }
    Ok(index)
}

/// Ranks snippets by BM25 against `query_text`. Repeated query tokens count
/// once. Ties are broken by ascending snippet id; snippets sharing no token
/// with the query are never returned.
pub fn query_top_k(index: &SnippetIndex, query_text: &str, k: usize) -> Vec<ScoredSnippet> {
    let n = index.doc_count() as f64;
    let avgdl = index.avg_doc_length();
    let terms: BTreeSet<String> = tokenize(query_text).into_iter().collect();
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for term in &terms {
        let postings = index.postings(term);
        if postings.is_empty() {
            continue;
        }
        let df = postings.len() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        for (id, tf) in postings {
            let tf = f64::from(*tf);
            let dl = index.doc_lengths[id] as f64;
            let norm = tf + K1 * (1.0 - B + B * dl / avgdl);
            *scores.entry(id.as_str()).or_default() += idf * tf * (K1 + 1.0) / norm;
        }
    }
    let mut ranked: Vec<(&str, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(id, score)| ScoredSnippet { snippet: index.snippets[id].clone(), score })
        .collect()
}

/// Reads a JSON Lines snippet store (`{"id", "source", "text"}` per line).
pub fn load_snippets(path: &Path) -> Result<Vec<Snippet>, KnowledgeError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io { path: name.clone(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| KnowledgeError::Format {
                path: name.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
