//! Pluggable text encoder with a deterministic hashed TF-IDF default.
//!
//! Tokens are lowercased alphanumeric runs. Each token becomes a d-vector
//! through signed feature hashing of the token itself plus its (previous,
//! current) bigram window, scaled by IDF. The pooled sentence vector is the
//! L2-normalized mean of the token vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// IDF weight assigned to tokens never seen during `fit`.
pub const DEFAULT_IDF: f64 = 1.0;

const BIGRAM_WEIGHT: f64 = 0.5;

/// Fitted encoder state: dimension, hash seed, and the IDF table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub dimension: usize,
    pub hash_seed: u64,
    pub document_count: usize,
    /// token -> idf weight; BTreeMap keeps serialization byte-stable.
    pub idf: BTreeMap<String, f64>,
}

/// Per-token vectors plus the pooled sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequenceEncoding {
    pub token_vectors: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    /// Set when the text had no tokens (pooled is the zero vector).
    pub degenerate: bool,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x0100_0000_01b3);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Encoder {
    /// Fits IDF over the corpus documents. Deterministic.
    pub fn fit(corpus: &[String], dimension: usize, hash_seed: u64) -> Result<Encoder> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut seen: Vec<String> = tokenize(doc);
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        Ok(Encoder { dimension, hash_seed, document_count: corpus.len(), idf })
    }

    fn idf_of(&self, token: &str) -> f64 {
        self.idf.get(token).copied().unwrap_or(DEFAULT_IDF)
    }

    /// Adds a signed hashed feature to `vec`.
    fn hash_into(&self, vec: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(self.hash_seed, feature.as_bytes());
        let idx = ((h >> 1) % self.dimension as u64) as usize;
        let sign = if h & 1 == 1 { 1.0 } else { -1.0 };
        vec[idx] += sign * weight;
    }

    /// Encodes one text. Zero-token texts yield a zero pooled vector with
    /// the degenerate flag set.
    pub fn encode(&self, text: &str) -> TokenSequenceEncoding {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return TokenSequenceEncoding {
                token_vectors: Vec::new(),
                pooled: vec![0.0; self.dimension],
                degenerate: true,
            };
        }
        let mut token_vectors = Vec::with_capacity(tokens.len());
        for (j, token) in tokens.iter().enumerate() {
            let mut v = vec![0.0; self.dimension];
            let idf = self.idf_of(token);
            self.hash_into(&mut v, &format!("u:{token}"), idf);
            if j > 0 {
                self.hash_into(&mut v, &format!("b:{}|{}", tokens[j - 1], token), BIGRAM_WEIGHT * idf);
            }
            token_vectors.push(v);
        }
        let mut pooled = vec![0.0; self.dimension];
        for v in &token_vectors {
            for (p, x) in pooled.iter_mut().zip(v) {
                *p += x;
            }
        }
        let inv_n = 1.0 / token_vectors.len() as f64;
        for p in pooled.iter_mut() {
            *p *= inv_n;
        }
        let norm = crate::neural::l2_norm(&pooled);
        if norm < 1e-12 {
            // Total hash cancellation; treat like an empty text.
            return TokenSequenceEncoding {
                token_vectors,
                pooled: vec![0.0; self.dimension],
                degenerate: true,
            };
        }
        for p in pooled.iter_mut() {
            *p /= norm;
        }
        TokenSequenceEncoding { token_vectors, pooled, degenerate: false }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("encoder serialization")
    }

    pub fn from_json(json: &str) -> Result<Encoder> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Cosine similarity of pooled encodings.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (crate::neural::l2_norm(a), crate::neural::l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    crate::neural::dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn corpus(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_document_corpus_gives_equal_idf() {
        let enc = Encoder::fit(&corpus(&["alpha beta gamma"]), 32, 0).unwrap();
        let weights: Vec<f64> = enc.idf.values().copied().collect();
        assert_eq!(weights.len(), 3);
        for w in &weights {
            assert!((w - weights[0]).abs() < 1e-15);
        }
        // ln(2/2) + 1
        assert!((weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn held_out_token_uses_default_idf() {
        let enc = Encoder::fit(&corpus(&["alpha beta", "alpha gamma", "alpha delta"]), 64, 3).unwrap();
        // A single-token text has one unigram feature, so the token vector
        // magnitude is exactly the idf weight.
        let unknown = enc.encode("zzz");
        assert!((crate::neural::l2_norm(&unknown.token_vectors[0]) - DEFAULT_IDF).abs() < 1e-12);
        // "beta" appears in 1 of 3 documents: idf = ln(4/2) + 1.
        let known = enc.encode("beta");
        let expected = (4.0f64 / 2.0).ln() + 1.0;
        assert!((crate::neural::l2_norm(&known.token_vectors[0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn refitting_the_same_corpus_is_identical() {
        let c = corpus(&["alpha beta", "beta gamma gamma"]);
        let a = Encoder::fit(&c, 16, 9).unwrap();
        let b = Encoder::fit(&c, 16, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoding_is_pure() {
        let enc = Encoder::fit(&corpus(&["reset outlook password"]), 64, 1).unwrap();
        assert_eq!(enc.encode("reset the password"), enc.encode("reset the password"));
    }

    #[test]
    fn pooled_vector_is_unit_norm() {
        let enc = Encoder::fit(&corpus(&["alpha beta gamma delta"]), 64, 1).unwrap();
        for text in ["alpha", "beta gamma", "delta delta alpha unseen"] {
            let e = enc.encode(text);
            assert!((crate::neural::l2_norm(&e.pooled) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_text_is_degenerate_zero() {
        let enc = Encoder::fit(&corpus(&["alpha"]), 16, 1).unwrap();
        let e = enc.encode("  \t ...");
        assert!(e.degenerate);
        assert!(e.pooled.iter().all(|&v| v == 0.0));
        assert!(e.token_vectors.is_empty());
    }

    /// Brute-force bag-of-words cosine used as an independent oracle.
    fn bow_cosine(a: &str, b: &str) -> f64 {
        let count = |t: &str| -> HashMap<String, f64> {
            let mut m = HashMap::new();
            for tok in tokenize(t) {
                *m.entry(tok).or_insert(0.0) += 1.0;
            }
            m
        };
        let (ca, cb) = (count(a), count(b));
        let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).copied().unwrap_or(0.0)).sum();
        let na: f64 = ca.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = cb.values().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn cosine_ordering_agrees_with_bag_of_words_oracle() {
        let docs = corpus(&[
            "reset outlook password",
            "outlook password reset",
            "excel chart legend",
            "outlook calendar sync",
        ]);
        let enc = Encoder::fit(&docs, 256, 7).unwrap();
        let q = enc.encode("reset outlook password");
        let same = enc.encode("outlook password reset");
        let other = enc.encode("excel chart legend");
        let hashed_close = cosine(&q.pooled, &same.pooled);
        let hashed_far = cosine(&q.pooled, &other.pooled);
        assert!(hashed_close > hashed_far);
        // The oracle agrees on the ordering.
        let bow_close = bow_cosine("reset outlook password", "outlook password reset");
        let bow_far = bow_cosine("reset outlook password", "excel chart legend");
        assert!(bow_close > bow_far);
    }

    #[test]
    fn dimension_is_stable_across_texts() {
        let enc = Encoder::fit(&corpus(&["a b c", "d e"]), 48, 2).unwrap();
        for text in ["a", "a b c d e f g", "zzz yyy"] {
            assert_eq!(enc.encode(text).pooled.len(), 48);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let enc = Encoder::fit(&corpus(&["alpha beta", "gamma"]), 32, 11).unwrap();
        let back = Encoder::from_json(&enc.to_json()).unwrap();
        assert_eq!(enc, back);
    }

    proptest! {
        #[test]
        fn encode_ignores_surrounding_whitespace(
            words in prop::collection::vec("[a-z]{1,6}", 1..6),
            pad_left in "[ \t\n]{0,4}",
            pad_right in "[ \t\n]{0,4}",
        ) {
            let text = words.join(" ");
            let enc = Encoder::fit(&[text.clone()], 32, 5).unwrap();
            let padded = format!("{pad_left}{text}{pad_right}");
            prop_assert_eq!(enc.encode(&text), enc.encode(&padded));
        }
    }
}
