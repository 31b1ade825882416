//! HTTP backend for a real generator.
//!
//! Request: `POST <url>` with JSON `{"prompt": str, "temperature": 0, "max_tokens": int}`
//! and, when a key is configured, `Authorization: Bearer <key>`.
//! Response: `{"text": str}`.
//!
//! The prompt is the text of each passage in sequence order followed by the
//! query, newline-separated. An empty sequence sends the bare query.
//!
//! When `score_likelihood` is enabled the adapter can also ask for the target's
//! log-likelihood by adding `"target": str` to the request and reading
//! `"target_logprob"` (summed natural-log probability) and `"target_tokens"`
//! from the response.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalResult, Evaluate, PassageSequence, TaskExample};
use crate::metrics::Metric;
use crate::retrieval::Corpus;

pub const URL_ENV: &str = "BGM_LLM_URL";
pub const KEY_ENV: &str = "BGM_LLM_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub max_tokens: u32,
    /// Retries after the first failed attempt.
    pub n_retries: usize,
    pub retry_backoff: Duration,
    pub timeout: Duration,
    pub max_inflight: usize,
    pub score_likelihood: bool,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            max_tokens: 128,
            n_retries: 3,
            retry_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
            max_inflight: 8,
            score_likelihood: false,
        }
    }

    /// Read `BGM_LLM_URL` and, if present, `BGM_LLM_KEY`.
    pub fn from_env() -> Result<Self, EvalError> {
        let url = std::env::var(URL_ENV).map_err(|_| EvalError::NotConfigured(format!("{URL_ENV} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    temperature: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a str>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
    #[serde(default)]
    target_logprob: Option<f64>,
    #[serde(default)]
    target_tokens: Option<usize>,
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

pub struct LlmAdapter<'a> {
    corpus: &'a Corpus,
    cfg: EndpointConfig,
    metric: Metric,
    agent: ureq::Agent,
    permits: Permits,
}

impl<'a> LlmAdapter<'a> {
    pub fn new(corpus: &'a Corpus, cfg: EndpointConfig, metric: Metric) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits {
            free: Mutex::new(cfg.max_inflight.max(1)),
            cv: Condvar::new(),
        };
        Self {
            corpus,
            cfg,
            metric,
            agent,
            permits,
        }
    }

    pub fn build_prompt(&self, example: &TaskExample, seq: &PassageSequence) -> Result<String, EvalError> {
        let mut parts = Vec::with_capacity(seq.len() + 1);
        for id in seq.ids() {
            let p = self.corpus.get(id).ok_or_else(|| EvalError::UnknownPassage {
                example_id: example.example_id.clone(),
                passage_id: id.clone(),
            })?;
            parts.push(p.text.as_str());
        }
        parts.push(&example.query.text);
        Ok(parts.join("\n"))
    }

    fn call(&self, example: &TaskExample, request: &GenerateRequest<'_>) -> Result<GenerateResponse, EvalError> {
        let _permit = self.permits.acquire();
        let attempts = self.cfg.n_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.cfg.retry_backoff * attempt as u32);
            }
            match self.try_once(request) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(message)) => {
                    warn!("example {}: malformed response: {message}", example.example_id);
                    return Err(EvalError::Malformed {
                        example_id: example.example_id.clone(),
                        message,
                    });
                }
                Err(Attempt::Retry(message)) => {
                    warn!(
                        "example {}: attempt {}/{attempts} failed: {message}",
                        example.example_id,
                        attempt + 1
                    );
                    last = message;
                }
            }
        }
        Err(EvalError::Retryable {
            example_id: example.example_id.clone(),
            attempts,
            message: last,
        })
    }

    fn try_once(&self, request: &GenerateRequest<'_>) -> Result<GenerateResponse, Attempt> {
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        // Auth, rate limiting and server errors may clear up; other 4xx will not.
        if status == 401 || status == 403 || status == 408 || status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(format!("HTTP {status}")));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| Attempt::Fatal(format!("{e}: {body:.200}")))
    }
}

impl Evaluate for LlmAdapter<'_> {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
        let prompt = self.build_prompt(example, seq)?;
        let request = GenerateRequest {
            prompt: &prompt,
            temperature: 0,
            max_tokens: self.cfg.max_tokens,
            target: None,
        };
        let output_text = self.call(example, &request)?.text;
        let reward = self
            .metric
            .score(&output_text, &example.target)
            .map_err(|source| EvalError::Metric {
                example_id: example.example_id.clone(),
                source,
            })?;
        Ok(EvalResult {
            output_text,
            reward,
            metric: self.metric,
        })
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn negative_perplexity(
        &self,
        example: &TaskExample,
        seq: &PassageSequence,
    ) -> Option<Result<f64, EvalError>> {
        if !self.cfg.score_likelihood {
            return None;
        }
        Some((|| {
            let prompt = self.build_prompt(example, seq)?;
            let request = GenerateRequest {
                prompt: &prompt,
                temperature: 0,
                max_tokens: self.cfg.max_tokens,
                target: Some(&example.target),
            };
            let resp = self.call(example, &request)?;
            match (resp.target_logprob, resp.target_tokens) {
                (Some(lp), Some(n)) if n > 0 && lp.is_finite() => Ok(-(-lp / n as f64).exp()),
                _ => Err(EvalError::Malformed {
                    example_id: example.example_id.clone(),
                    message: "missing target_logprob/target_tokens".into(),
                }),
            }
        })())
    }
}
