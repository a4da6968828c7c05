use super::{EmbeddingVector, Embedder};
use crate::error::Result;

const NGRAM: usize = 3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Deterministic character-trigram hashing embedder.
///
/// Text is lowercased, whitespace-collapsed and padded with one space on each
/// side; every character trigram increments one of `dim` buckets (FNV-1a,
/// seeded), and the count vector is L2-normalized. Counts are non-negative, so
/// texts sharing any trigram have positive cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    /// `dim` is raised to 8 if smaller.
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim: dim.max(8),
            seed,
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0f64; self.dim];
        for gram in char_ngrams(text) {
            counts[(self.hash(&gram) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        let values = counts
            .into_iter()
            .map(|c| if norm > 0.0 { (c / norm) as f32 } else { 0.0 })
            .collect();
        EmbeddingVector(values)
    }

    fn hash(&self, gram: &str) -> u64 {
        let mut h = FNV_OFFSET ^ self.seed.wrapping_mul(FNV_PRIME);
        for b in gram.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }
}

/// Padded, lowercased character trigrams of `text`, in order.
pub(crate) fn char_ngrams(text: &str) -> Vec<String> {
    let normalized = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let chars: Vec<char> = format!(" {normalized} ").chars().collect();
    if chars.len() < NGRAM {
        return Vec::new();
    }
    chars.windows(NGRAM).map(|w| w.iter().collect()).collect()
}

impl Embedder for HashEmbedder {
    fn backend_name(&self) -> String {
        format!("hash-ngram:dim={}:seed={}", self.dim, self.seed)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn embed_hash(texts: &[String], dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let embedder = HashEmbedder::new(dim, seed);
    texts.iter().map(|t| embedder.embed_one(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn v(text: &str) -> EmbeddingVector {
        embed_hash(&[text.to_string()], 256, 0).pop().unwrap()
    }

    // Multiset overlap of trigrams, computed without hashing.
    fn overlap(a: &str, b: &str) -> usize {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for g in char_ngrams(a) {
            *counts.entry(g).or_default() += 1;
        }
        let mut shared = 0;
        for g in char_ngrams(b) {
            if let Some(c) = counts.get_mut(&g) {
                if *c > 0 {
                    *c -= 1;
                    shared += 1;
                }
            }
        }
        shared
    }

    #[test]
    fn deterministic() {
        let a = embed_hash(&["abc".into()], 64, 0);
        let b = embed_hash(&["abc".into()], 64, 0);
        assert_eq!(a, b);
        assert_ne!(a, embed_hash(&["abc".into()], 64, 1));
    }

    #[test]
    fn self_similarity_is_one() {
        let x = v("weather forecast");
        assert!((x.cosine(&x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_ngrams_rank_closer() {
        let base = "weather forecast api";
        let near = "weather api";
        let far = "stock prices";
        assert!(overlap(base, near) > overlap(base, far));
        assert!(v(base).cosine(&v(near)) > v(base).cosine(&v(far)));
    }

    #[test]
    fn sharing_any_ngram_gives_positive_cosine() {
        assert!(overlap("abcdef", "xyzdef") > 0);
        assert!(v("abcdef").cosine(&v("xyzdef")) > 0.0);
    }

    #[test]
    fn small_dims_are_raised() {
        assert_eq!(HashEmbedder::new(2, 0).dim(), Some(8));
    }
}
