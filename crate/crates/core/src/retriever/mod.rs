//! The retrieval environment: embedders, exact dense search, and BM25.
//!
//! Everything that answers "top-k tools for this text" implements
//! [`Retriever`]. Runs always have contiguous 1-based ranks, distinct tool ids
//! and non-increasing scores; equal scores are ordered by corpus position.

mod bm25;
mod hash;
mod remote;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{RenderStyle, ToolCorpus};
use crate::error::{Error, Result};

pub use bm25::{search_bm25, Bm25Index, Bm25Params};
pub use hash::{embed_hash, HashEmbedder};
pub use remote::{embed_remote, RemoteBatch, RemoteEmbedder, RemoteEndpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    /// Cosine similarity; zero when either vector has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

/// Turns texts into vectors of one fixed dimension.
pub trait Embedder: Send + Sync {
    /// Stable identifier recorded in index provenance.
    fn backend_name(&self) -> String;

    /// Known dimension, if the backend can tell without a call.
    fn dim(&self) -> Option<usize>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub tool_id: String,
    pub score: f64,
    pub rank: usize,
}

/// One ranked list returned for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub query_text: String,
    pub hits: Vec<Hit>,
}

impl RetrievalRun {
    /// Assigns ranks 1..n to already ordered `(tool_id, score)` pairs.
    pub fn from_ordered(query_text: impl Into<String>, scored: Vec<(String, f64)>) -> Self {
        let hits = scored
            .into_iter()
            .enumerate()
            .map(|(i, (tool_id, score))| Hit {
                tool_id,
                score,
                rank: i + 1,
            })
            .collect();
        Self {
            query_text: query_text.into(),
            hits,
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn tool_ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.tool_id.as_str()).collect()
    }

    pub fn rank_of(&self, tool_id: &str) -> Option<usize> {
        self.hits.iter().find(|h| h.tool_id == tool_id).map(|h| h.rank)
    }

    /// Checks the ranking contract. Used by tests and on deserialized input.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, hit) in self.hits.iter().enumerate() {
            if hit.rank != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "rank {} at position {}",
                    hit.rank,
                    i + 1
                )));
            }
            if !seen.insert(hit.tool_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tool {}", hit.tool_id)));
            }
            if i > 0 && hit.score > self.hits[i - 1].score {
                return Err(Error::InvalidArgument("scores increase with rank".into()));
            }
        }
        Ok(())
    }
}

/// Identity of an index: what produced it and over which corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub dim: usize,
    pub render_style: RenderStyle,
    pub corpus_hash: String,
}

impl Provenance {
    /// Backend identity without the corpus hash.
    pub fn retriever_key(&self) -> String {
        format!("{}|{}|{}", self.backend, self.render_style.as_str(), self.dim)
    }
}

pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalRun>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn provenance(&self) -> Provenance;
}

/// Sorts by score descending, then position ascending, and keeps `k`.
pub(crate) fn top_k(scored: &mut Vec<(usize, f64)>, k: usize) {
    scored.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    scored.truncate(k);
}

/// Exact brute-force cosine index over a rendered corpus.
pub struct DenseIndex {
    embedder: Arc<dyn Embedder>,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    query_prefix: String,
    provenance: Provenance,
}

impl std::fmt::Debug for DenseIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseIndex")
            .field("size", &self.ids.len())
            .field("provenance", &self.provenance)
            .finish()
    }
}

const BUILD_BATCH: usize = 64;

pub fn build_index(
    corpus: &ToolCorpus,
    embedder: Arc<dyn Embedder>,
    render_style: RenderStyle,
) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut vectors = Vec::with_capacity(corpus.len());
    for chunk in corpus.tools().chunks(BUILD_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|t| t.render(render_style)).collect();
        match embedder.embed_batch(&texts) {
            Ok(batch) if batch.len() == texts.len() => vectors.extend(batch),
            Ok(batch) => {
                return Err(Error::Embedding {
                    tool_id: chunk[batch.len().min(chunk.len() - 1)].id.clone(),
                    message: format!("expected {} vectors, got {}", texts.len(), batch.len()),
                })
            }
            Err(batch_err) => {
                // Find the tool that breaks the batch.
                for (tool, text) in chunk.iter().zip(&texts) {
                    if let Err(e) = embedder.embed_batch(std::slice::from_ref(text)) {
                        return Err(Error::Embedding {
                            tool_id: tool.id.clone(),
                            message: e.to_string(),
                        });
                    }
                }
                return Err(Error::Embedding {
                    tool_id: chunk[0].id.clone(),
                    message: batch_err.to_string(),
                });
            }
        }
    }
    let dim = vectors[0].dim();
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let provenance = Provenance {
        backend: embedder.backend_name(),
        dim,
        render_style,
        corpus_hash: corpus.content_hash(),
    };
    Ok(DenseIndex::from_parts(
        embedder,
        corpus.iter().map(|t| t.id.clone()).collect(),
        vectors,
        provenance,
    ))
}

impl DenseIndex {
    fn from_parts(
        embedder: Arc<dyn Embedder>,
        ids: Vec<String>,
        vectors: Vec<EmbeddingVector>,
        provenance: Provenance,
    ) -> Self {
        let norms = vectors.iter().map(EmbeddingVector::norm).collect();
        Self {
            embedder,
            ids,
            vectors,
            norms,
            query_prefix: String::new(),
            provenance,
        }
    }

    /// Text prepended to every query before embedding, for instruction-tuned
    /// backends.
    pub fn with_query_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.query_prefix = prefix.into();
        self
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let cache = CacheFile {
            header: CacheHeader {
                format: CACHE_FORMAT,
                provenance: self.provenance.clone(),
                size: self.ids.len(),
            },
            ids: self.ids.clone(),
            vectors: self.vectors.clone(),
        };
        let body = serde_json::to_string(&cache)?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache written by [`DenseIndex::save_cache`], rejecting it when
    /// it was built from another corpus or backend.
    pub fn load_cache(
        path: impl AsRef<Path>,
        corpus: &ToolCorpus,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: CacheFile =
            serde_json::from_str(&body).map_err(|e| Error::CacheCorrupt(e.to_string()))?;
        if cache.header.format != CACHE_FORMAT {
            return Err(Error::CacheCorrupt(format!(
                "unsupported format {}",
                cache.header.format
            )));
        }
        let prov = cache.header.provenance;
        let corpus_hash = corpus.content_hash();
        if prov.corpus_hash != corpus_hash {
            return Err(Error::ProvenanceMismatch {
                expected: corpus_hash,
                found: prov.corpus_hash,
            });
        }
        if prov.backend != embedder.backend_name() {
            return Err(Error::ProvenanceMismatch {
                expected: embedder.backend_name(),
                found: prov.backend,
            });
        }
        let size = cache.header.size;
        if cache.ids.len() != size || cache.vectors.len() != size || size != corpus.len() {
            return Err(Error::CacheCorrupt("size does not match header".into()));
        }
        if cache.ids.iter().zip(corpus.iter()).any(|(id, t)| *id != t.id) {
            return Err(Error::CacheCorrupt("tool ids out of corpus order".into()));
        }
        if cache.vectors.iter().any(|v| v.dim() != prov.dim || v.values().iter().any(|x| !x.is_finite())) {
            return Err(Error::CacheCorrupt("vector dimension does not match header".into()));
        }
        Ok(Self::from_parts(embedder, cache.ids, cache.vectors, prov))
    }
}

const CACHE_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: u32,
    #[serde(flatten)]
    provenance: Provenance,
    size: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    header: CacheHeader,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

impl Retriever for DenseIndex {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalRun> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let text = format!("{}{}", self.query_prefix, query);
        let qv = self
            .embedder
            .embed_batch(std::slice::from_ref(&text))?
            .pop()
            .ok_or_else(|| Error::InvalidArgument("embedder returned no vector".into()))?;
        if qv.dim() != self.provenance.dim {
            return Err(Error::DimensionMismatch {
                expected: self.provenance.dim,
                actual: qv.dim(),
            });
        }
        let qn = qv.norm();
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (v, &n))| {
                let denom = qn * n;
                (i, if denom == 0.0 { 0.0 } else { qv.dot(v) / denom })
            })
            .collect();
        top_k(&mut scored, k);
        Ok(RetrievalRun::from_ordered(
            query,
            scored
                .into_iter()
                .map(|(i, s)| (self.ids[i].clone(), s))
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

pub fn search(retriever: &dyn Retriever, query: &str, k: usize) -> Result<RetrievalRun> {
    retriever.search(query, k)
}
