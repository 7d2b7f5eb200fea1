//! Client for an external embedding service.
//!
//! Wire format: `POST {endpoint}` with body `{"model": <id>, "input": <text>}`,
//! answered by `{"vector": [f64; dim]}`. Transport failures and 5xx responses
//! are retried with linear backoff. Only text fingerprints are logged.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{text_fingerprint, EmbedError, Embedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        RemoteEmbedderConfig {
            endpoint: "http://127.0.0.1:8089/embed".into(),
            model: "tiny-clinicalbert".into(),
            dim: super::DEFAULT_EMBEDDING_DIM,
            timeout_ms: 5_000,
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

impl RemoteEmbedderConfig {
    /// Overrides fields from `EWI_EMBED_ENDPOINT`, `EWI_EMBED_MODEL` and `EWI_EMBED_TIMEOUT_MS`.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var("EWI_EMBED_ENDPOINT") {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var("EWI_EMBED_MODEL") {
            self.model = v;
        }
        if let Some(v) = std::env::var("EWI_EMBED_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse().ok())
        {
            self.timeout_ms = v;
        }
        self
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| EmbedError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(RemoteEmbedder { config, client })
    }

    fn attempt(&self, text: &str) -> Result<Vec<f64>, (bool, String)> {
        let response = self
            .client
            .post(&self.config.endpoint)
            .json(&EmbedRequest {
                model: &self.config.model,
                input: text,
            })
            .send()
            .map_err(|e| (true, e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err((status.is_server_error(), format!("HTTP {status}")));
        }
        let body: EmbedResponse = response.json().map_err(|e| (false, e.to_string()))?;
        Ok(body.vector)
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn identity(&self) -> String {
        format!("remote/{}/dim={}", self.config.model, self.config.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let fp = text_fingerprint(text);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(text) {
                Ok(vector) if vector.len() == self.config.dim => {
                    log::debug!("embedded text {fp} on attempt {attempt}");
                    return Ok(vector);
                }
                Ok(vector) => {
                    return Err(EmbedError::Dimension {
                        expected: self.config.dim,
                        got: vector.len(),
                    })
                }
                Err((retryable, message)) => {
                    log::warn!("embedding text {fp} failed (attempt {attempt}/{attempts}): {message}");
                    last = message;
                    if !retryable {
                        return Err(EmbedError::Transport { attempts: attempt, message: last });
                    }
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(EmbedError::Transport { attempts, message: last })
    }

    fn embed_batch(&self, texts: &[String]) -> Vec<Result<Vec<f64>, EmbedError>> {
        let workers = self.config.max_in_flight.max(1);
        let chunk = texts.len().div_ceil(workers).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = texts
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|t| self.embed(t)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        })
    }
}
