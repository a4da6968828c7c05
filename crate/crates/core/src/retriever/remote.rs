use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EmbeddingVector, Embedder};
use crate::error::{Error, Result};
use crate::http::{self, RetryPolicy};

/// An OpenAI-style embeddings endpoint:
/// `POST {"input": [...], "model": name}` returning `{"data": [{"embedding": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEndpoint {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_batch: usize,
    /// Number of batches in flight at once.
    pub parallel_batches: usize,
    pub retry: RetryPolicy,
}

impl Default for RemoteEndpoint {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: "EMBED_API_KEY".into(),
            max_batch: 32,
            parallel_batches: 1,
            retry: RetryPolicy::default(),
        }
    }
}

impl RemoteEndpoint {
    fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteBatch {
    pub vectors: Vec<EmbeddingVector>,
    /// HTTP attempts summed over all batches.
    pub attempts: u32,
}

fn decode(endpoint: &RemoteEndpoint, reply: &Value, expected: usize) -> Result<Vec<EmbeddingVector>> {
    let bad = |message: String| Error::BadResponse {
        endpoint: endpoint.url.clone(),
        message,
    };
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing \"data\" array".into()))?;
    if data.len() != expected {
        return Err(bad(format!("expected {expected} embeddings, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(expected);
    for (i, item) in data.iter().enumerate() {
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| bad(format!("item {i} has no \"embedding\"")))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| bad(format!("item {i} has non-numeric values")))?;
        out.push(EmbeddingVector::new(values).map_err(|e| bad(format!("item {i}: {e}")))?);
    }
    Ok(out)
}

/// Embeds `texts` in order, splitting into batches of at most
/// `endpoint.max_batch`. An empty input makes no request.
pub fn embed_remote(texts: &[String], endpoint: &RemoteEndpoint) -> Result<RemoteBatch> {
    if texts.is_empty() {
        return Ok(RemoteBatch {
            vectors: Vec::new(),
            attempts: 0,
        });
    }
    let agent = http::agent(&endpoint.retry);
    let key = endpoint.api_key();
    let call = |chunk: &[String]| -> Result<(Vec<EmbeddingVector>, u32)> {
        let body = json!({ "input": chunk, "model": endpoint.model });
        let (reply, attempts) =
            http::post_json(&agent, &endpoint.url, key.as_deref(), &body, &endpoint.retry)?;
        Ok((decode(endpoint, &reply, chunk.len())?, attempts))
    };

    let chunks: Vec<&[String]> = texts.chunks(endpoint.max_batch.max(1)).collect();
    let mut results = Vec::with_capacity(chunks.len());
    for wave in chunks.chunks(endpoint.parallel_batches.max(1)) {
        if wave.len() == 1 {
            results.push(call(wave[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|chunk| s.spawn(|| call(chunk))).collect();
            for h in handles {
                results.push(h.join().expect("embedding worker panicked"));
            }
        });
    }

    let mut vectors = Vec::with_capacity(texts.len());
    let mut attempts = 0;
    for r in results {
        let (batch, n) = r?;
        vectors.extend(batch);
        attempts += n;
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.dim(),
        });
    }
    Ok(RemoteBatch { vectors, attempts })
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: RemoteEndpoint,
}

impl RemoteEmbedder {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self { endpoint }
    }
}

impl Embedder for RemoteEmbedder {
    fn backend_name(&self) -> String {
        format!("remote:{}", self.endpoint.model)
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        embed_remote(texts, &self.endpoint).map(|b| b.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_makes_no_request() {
        // The URL is unroutable; any request would fail.
        let ep = RemoteEndpoint {
            url: "http://127.0.0.1:1/embeddings".into(),
            ..RemoteEndpoint::default()
        };
        let out = embed_remote(&[], &ep).unwrap();
        assert!(out.vectors.is_empty());
        assert_eq!(out.attempts, 0);
    }

    #[test]
    fn decode_checks_shape() {
        let ep = RemoteEndpoint::default();
        let ok = json!({"data": [{"embedding": [1.0, 2.0]}, {"embedding": [0.5, 0.5]}]});
        assert_eq!(decode(&ep, &ok, 2).unwrap().len(), 2);
        assert!(decode(&ep, &ok, 3).is_err());
        assert!(decode(&ep, &json!({"nope": 1}), 1).is_err());
        assert!(decode(&ep, &json!({"data": [{"embedding": ["x"]}]}), 1).is_err());
    }
}
