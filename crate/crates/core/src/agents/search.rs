use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::knowledge::{index_snippets, query_top_k, KnowledgeError, Snippet, SnippetIndex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub title: String,
    pub summary: String,
}

/// Web search used by the online search augmentation route.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String>;
}

/// Offline search over a fixed result set, ranked lexically. Stands in for a
/// live search API so runs stay reproducible.
pub struct StaticSearchClient {
    index: SnippetIndex,
    hits: BTreeMap<String, SearchHit>,
}

impl StaticSearchClient {
    pub fn new(hits: Vec<SearchHit>) -> Result<Self, KnowledgeError> {
        let snippets = hits
            .iter()
            .map(|h| Snippet { id: h.id.clone(), source: "search".into(), text: format!("{} {}", h.title, h.summary) })
            .collect();
        let index = index_snippets(snippets)?;
        Ok(StaticSearchClient { index, hits: hits.into_iter().map(|h| (h.id.clone(), h)).collect() })
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

impl SearchClient for StaticSearchClient {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String> {
        Ok(query_top_k(&self.index, query, k)
            .into_iter()
            .map(|s| self.hits[&s.snippet.id].clone())
            .collect())
    }
}

/// Reads `{"id", "title", "summary"}` JSON Lines.
pub fn load_search_hits(path: &Path) -> Result<Vec<SearchHit>, KnowledgeError> {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(id: &str, title: &str, summary: &str) -> SearchHit {
        SearchHit { id: id.into(), title: title.into(), summary: summary.into() }
    }

    #[test]
    fn ranks_by_relevance() {
        let client = StaticSearchClient::new(vec![
            hit("w1", "Aspirin", "Aspirin is used to prevent myocardial infarction."),
            hit("w2", "Creatinine", "Serum creatinine reflects kidney function."),
        ])
        .unwrap();
        let hits = client.search("serum creatinine", 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "w2");
        assert!(client.search("unrelated words", 3).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(StaticSearchClient::new(vec![hit("a", "x", "y"), hit("a", "z", "w")]).is_err());
    }
}
