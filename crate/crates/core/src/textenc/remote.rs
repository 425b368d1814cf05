//! Blocking client for an external text-embedding service.
//!
//! `POST {endpoint}/embed` with `{"texts": [...]}`; the service answers
//! `{"vectors": [[...]], "states": [[[...]]]}` where `states` may be omitted.

use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{TextEmbeddingSet, TextEncError};
use crate::corpus::CodeRegistry;

/// Default endpoint when none is passed explicitly.
pub const EMBED_URL_ENV: &str = "MEDTOK_EMBED_URL";

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retries: u32,
    /// Delay before the first retry; doubled for each later one.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            base_delay: Duration::from_millis(250),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    #[serde(default)]
    states: Option<Vec<Vec<Vec<f32>>>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RemoteEmbeddings {
    pub vectors: Vec<Vec<f32>>,
    /// One `len x dim` sequence per text; empty when the service sent none.
    pub states: Vec<Vec<Vec<f32>>>,
}

enum Attempt {
    Transient(String),
    Fatal(String),
}

pub struct EmbeddingClient {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    dim: Option<usize>,
}

impl EmbeddingClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retry: RetryPolicy::default(),
            dim: None,
        }
    }

    /// Client for the endpoint named by `MEDTOK_EMBED_URL`.
    pub fn from_env(timeout: Duration) -> Result<Self, TextEncError> {
        let url = std::env::var(EMBED_URL_ENV)
            .map_err(|_| TextEncError::Service(format!("{EMBED_URL_ENV} is not set")))?;
        Ok(Self::new(url, timeout))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Dimension fixed by the first successful call.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn fetch(&mut self, texts: &[String]) -> Result<RemoteEmbeddings, TextEncError> {
        if texts.is_empty() {
            return Ok(RemoteEmbeddings::default());
        }
        let url = format!("{}/embed", self.endpoint);
        let mut last = String::new();
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                warn!("embedding request failed ({last}); retry {attempt} in {delay:?}");
                thread::sleep(delay);
            }
            match self.attempt(&url, texts) {
                Ok(resp) => return self.validate(texts.len(), resp),
                Err(Attempt::Fatal(msg)) => return Err(TextEncError::Service(msg)),
                Err(Attempt::Transient(msg)) => last = msg,
            }
        }
        Err(TextEncError::Service(format!(
            "{url}: giving up after {} attempts: {last}",
            self.retry.retries + 1
        )))
    }

    fn attempt(&self, url: &str, texts: &[String]) -> Result<EmbedResponse, Attempt> {
        let mut resp = self
            .agent
            .post(url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let msg = format!("{url}: HTTP {status}");
            return Err(if status >= 500 || status == 429 || status == 408 {
                Attempt::Transient(msg)
            } else {
                Attempt::Fatal(msg)
            });
        }
        resp.body_mut()
            .read_json::<EmbedResponse>()
            .map_err(|e| Attempt::Fatal(format!("{url}: malformed response: {e}")))
    }

    fn validate(&mut self, n: usize, resp: EmbedResponse) -> Result<RemoteEmbeddings, TextEncError> {
        if resp.vectors.len() != n {
            return Err(TextEncError::Contract(format!(
                "sent {n} texts, received {} vectors",
                resp.vectors.len()
            )));
        }
        let dim = resp.vectors[0].len();
        if dim == 0 {
            return Err(TextEncError::Contract("zero-dimensional vectors".into()));
        }
        if let Some(prev) = self.dim {
            if prev != dim {
                return Err(TextEncError::Contract(format!(
                    "dimension changed from {prev} to {dim} between calls"
                )));
            }
        }
        let all_vals = resp.vectors.iter().flatten();
        if resp.vectors.iter().any(|v| v.len() != dim) {
            return Err(TextEncError::Contract("vectors of differing dimension in one response".into()));
        }
        let states = resp.states.unwrap_or_default();
        if !states.is_empty() {
            if states.len() != n {
                return Err(TextEncError::Contract(format!(
                    "sent {n} texts, received {} state sequences",
                    states.len()
                )));
            }
            if states.iter().flatten().any(|row| row.len() != dim) {
                return Err(TextEncError::Contract("state rows differ from vector dimension".into()));
            }
        }
        if all_vals
            .chain(states.iter().flatten().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(TextEncError::Contract("non-finite values".into()));
        }
        self.dim = Some(dim);
        Ok(RemoteEmbeddings {
            vectors: resp.vectors,
            states,
        })
    }

    /// Embeds every registry description in `batch_size` chunks.
    pub fn embed_registry(
        &mut self,
        registry: &CodeRegistry,
        batch_size: usize,
    ) -> Result<TextEmbeddingSet, TextEncError> {
        let codes: Vec<_> = registry.iter().collect();
        let mut set: Option<TextEmbeddingSet> = None;
        for chunk in codes.chunks(batch_size.max(1)) {
            let texts: Vec<String> = chunk.iter().map(|c| c.description.clone()).collect();
            let out = self.fetch(&texts)?;
            let set = set.get_or_insert_with(|| TextEmbeddingSet::new(out.vectors[0].len()));
            for (i, code) in chunk.iter().enumerate() {
                set.insert_pooled(&code.code_id, &out.vectors[i])?;
                if let Some(seq) = out.states.get(i).filter(|s| !s.is_empty()) {
                    let flat: Vec<f32> = seq.iter().flatten().copied().collect();
                    set.insert_states(&code.code_id, seq.len(), flat)?;
                }
            }
        }
        Ok(set.unwrap_or_else(|| TextEmbeddingSet::new(0)))
    }
}
