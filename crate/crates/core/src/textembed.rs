//! Frozen hashed text embedder.
//!
//! Text is lowercased and split on any non-alphanumeric character. Every
//! unigram and every adjacent bigram (joined by one space) is hashed with
//! 64-bit FNV-1a over `HASH_SEED.to_le_bytes() ++ token`. The hash selects
//! bucket `hash % dim` and a sign from bit 63 (set means -1). The summed
//! vector is L2-normalized; text without tokens maps to the zero vector.

use serde::{Deserialize, Serialize};

/// Seed prefix mixed into every token hash.
pub const HASH_SEED: u64 = 0x414E_4154_414C_4E31;

pub const DEFAULT_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn token_hash(token: &str) -> u64 {
    let h = fnv1a64_extend(FNV_OFFSET, &HASH_SEED.to_le_bytes());
    fnv1a64_extend(h, token.as_bytes())
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub dim: usize,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl TextEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed(&self, text: &str) -> TextEmbedding {
        TextEmbedding {
            text: text.to_string(),
            vector: self.embed_vector(text),
        }
    }

    pub fn embed_vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens = tokenize(text);
        let mut add = |key: &str| {
            let h = token_hash(key);
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        };
        for t in &tokens {
            add(t);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        let e = TextEmbedder::default();
        assert!(e.embed("").vector.iter().all(|&x| x == 0.0));
        assert!(e.embed(" ,. ").vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negation_separates_embeddings() {
        let e = TextEmbedder::default();
        let a = e.embed_vector("consolidation");
        let b = e.embed_vector("no consolidation");
        assert!(cosine(&a, &b) < 1.0 - 1e-6);
    }

    #[test]
    fn bigrams_make_order_visible() {
        let e = TextEmbedder::default();
        assert_ne!(e.embed_vector("pleural effusion"), e.embed_vector("effusion pleural"));
    }

    #[test]
    fn case_and_punctuation_do_not_matter() {
        let e = TextEmbedder::default();
        assert_eq!(e.embed_vector("No Consolidation."), e.embed_vector("no consolidation"));
    }

    proptest! {
        #[test]
        fn unit_norm(text in "[a-z ]{0,40}") {
            let v = TextEmbedder::default().embed_vector(&text);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if tokenize(&text).is_empty() {
                prop_assert_eq!(n, 0.0);
            } else {
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}
