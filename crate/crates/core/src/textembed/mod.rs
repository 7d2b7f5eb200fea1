//! Text embeddings for medication and diagnosis records.
//!
//! Every record is rendered as `prompt + " " + category text`, split into
//! tokens, mapped to one vector per token and mean-pooled over the token
//! axis. All records of a patient-day are then mean-pooled again into one
//! daily vector.

mod remote;

pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_EMBEDDING_DIM: usize = 312;

/// Task prompt prepended to every record before embedding.
pub const DEFAULT_PROMPT: &str = "We aim to predict if the patient will experience a deterioration \
event in the next 24 hours (emergency response team, ICU admission, mortality).";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyInput,
    #[error("prompt prefix must not be empty")]
    EmptyPrompt,
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding service failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Provenance string; part of the feature-manifest hash.
    fn identity(&self) -> String;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Vec<Result<Vec<f64>, EmbedError>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    prefix: String,
}

impl PromptTemplate {
    pub fn new(prefix: impl Into<String>) -> Result<Self, EmbedError> {
        let prefix = prefix.into();
        if prefix.trim().is_empty() {
            return Err(EmbedError::EmptyPrompt);
        }
        Ok(PromptTemplate { prefix })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn render(&self, category_text: &str) -> String {
        format!("{} {}", self.prefix, category_text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            prefix: DEFAULT_PROMPT.to_string(),
        }
    }
}

/// Embeds one record: prompt plus category text, mean-pooled over tokens.
pub fn embed_text(
    embedder: &dyn Embedder,
    prompt: &PromptTemplate,
    category_text: &str,
) -> Result<Vec<f64>, EmbedError> {
    if category_text.trim().is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let vector = embedder.embed(&prompt.render(category_text))?;
    if vector.len() != embedder.dim() {
        return Err(EmbedError::Dimension {
            expected: embedder.dim(),
            got: vector.len(),
        });
    }
    Ok(vector)
}

/// Element-wise mean of one day's record embeddings; zeros when there are none.
pub fn pool_day(embeddings: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, EmbedError> {
    let mut pooled = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(EmbedError::Dimension {
                expected: dim,
                got: e.len(),
            });
        }
        for (acc, v) in pooled.iter_mut().zip(e) {
            *acc += v;
        }
    }
    if !embeddings.is_empty() {
        let n = embeddings.len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
    }
    Ok(pooled)
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic pseudo-embedding: every distinct token maps to a fixed
/// vector with components uniform in `[-1, 1]`, derived from a hash of the
/// token and the embedder seed.
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder {
            dim,
            seed,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn token_vector(&self, token: &str) -> Arc<[f64]> {
        if let Some(v) = self.cache.read().expect("cache lock").get(token) {
            return Arc::clone(v);
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v: Arc<[f64]> = (0..self.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        self.cache
            .write()
            .expect("cache lock")
            .insert(token.to_string(), Arc::clone(&v));
        v
    }

    /// One vector per token of `text`.
    pub fn token_vectors(&self, text: &str) -> Vec<Arc<[f64]>> {
        tokenize(text).iter().map(|t| self.token_vector(t)).collect()
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_EMBEDDING_DIM, 0x5eed_e3b1)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("hash-embedder/v1/dim={}/seed={}", self.dim, self.seed)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens = self.token_vectors(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut mean = vec![0.0; self.dim];
        for t in &tokens {
            for (acc, v) in mean.iter_mut().zip(t.iter()) {
                *acc += v;
            }
        }
        let m = tokens.len() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        Ok(mean)
    }
}

/// Short hash for logs; record text never reaches log output.
pub fn text_fingerprint(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization() {
        assert_eq!(
            tokenize("Piperacillin-Tazobactam 4.5 g (IV)"),
            vec!["piperacillin", "tazobactam", "4", "5", "g", "iv"]
        );
        assert!(tokenize("--  ,").is_empty());
    }

    #[test]
    fn embedding_is_deterministic_with_fixed_dimension() {
        let e = HashEmbedder::default();
        let p = PromptTemplate::default();
        let a = embed_text(&e, &p, "vancomycin 1 g intravenous").unwrap();
        let b = embed_text(&HashEmbedder::default(), &p, "vancomycin 1 g intravenous").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 312);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = embed_text(&e, &p, "naloxone 0.4 mg").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn three_token_text_is_mean_of_token_vectors() {
        let e = HashEmbedder::new(16, 3);
        let tokens = e.token_vectors("alpha beta gamma");
        assert_eq!(tokens.len(), 3);
        let got = e.embed("alpha beta gamma").unwrap();
        for j in 0..16 {
            let want = (tokens[0][j] + tokens[1][j] + tokens[2][j]) / 3.0;
            assert!((got[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let e = HashEmbedder::default();
        assert_eq!(
            embed_text(&e, &PromptTemplate::default(), "  "),
            Err(EmbedError::EmptyInput)
        );
        assert_eq!(PromptTemplate::new(" "), Err(EmbedError::EmptyPrompt));
    }

    #[test]
    fn pooling_cases() {
        let v = vec![1.0, -2.0, 0.5];
        let w = vec![3.0, 0.0, -0.5];
        assert_eq!(pool_day(&[v.clone()], 3).unwrap(), v);
        assert_eq!(pool_day(&[v.clone(), w.clone()], 3).unwrap(), vec![2.0, -1.0, 0.0]);
        assert_eq!(pool_day(&[], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(
            pool_day(&[v, vec![1.0]], 3),
            Err(EmbedError::Dimension { expected: 3, got: 1 })
        );
    }
}
