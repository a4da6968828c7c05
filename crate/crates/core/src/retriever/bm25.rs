use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{top_k, Provenance, RetrievalRun, Retriever};
use crate::corpus::{RenderStyle, ToolCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Lowercased alphanumeric runs. Underscores and punctuation separate tokens.
pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over rendered tool documents.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<f64>,
    avg_len: f64,
    doc_freq: HashMap<String, u32>,
    params: Bm25Params,
    provenance: Provenance,
}

impl Bm25Index {
    pub fn build(corpus: &ToolCorpus, style: RenderStyle, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut term_freqs = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for tool in corpus.iter() {
            let tokens = tokenize(&tool.render(style));
            doc_lens.push(tokens.len() as f64);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let avg_len = doc_lens.iter().sum::<f64>() / doc_lens.len() as f64;
        Ok(Self {
            ids: corpus.iter().map(|t| t.id.clone()).collect(),
            term_freqs,
            doc_lens,
            avg_len,
            doc_freq,
            params,
            provenance: Provenance {
                backend: format!("bm25:k1={}:b={}", params.k1, params.b),
                dim: 0,
                render_style: style,
                corpus_hash: corpus.content_hash(),
            },
        })
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score(&self, doc: usize, query_terms: &[String]) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.avg_len > 0.0 {
            self.doc_lens[doc] / self.avg_len
        } else {
            0.0
        };
        query_terms
            .iter()
            .filter_map(|term| {
                let tf = f64::from(*self.term_freqs[doc].get(term)?);
                Some(self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm)))
            })
            .sum()
    }
}

impl Retriever for Bm25Index {
    /// Documents sharing no query term are not returned, so a query with no
    /// known terms yields an empty run.
    fn search(&self, query: &str, k: usize) -> Result<RetrievalRun> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let terms = tokenize(query);
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len())
            .filter(|&d| terms.iter().any(|t| self.term_freqs[d].contains_key(t)))
            .map(|d| (d, self.score(d, &terms)))
            .collect();
        top_k(&mut scored, k);
        Ok(RetrievalRun::from_ordered(
            query,
            scored
                .into_iter()
                .map(|(d, s)| (self.ids[d].clone(), s))
                .collect(),
        ))
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn provenance(&self) -> Provenance {
        self.provenance.clone()
    }
}

/// One-shot BM25 search with default parameters over `schema_json` documents.
pub fn search_bm25(corpus: &ToolCorpus, query: &str, k: usize) -> Result<RetrievalRun> {
    Bm25Index::build(corpus, RenderStyle::SchemaJson, Bm25Params::default())?.search(query, k)
}
