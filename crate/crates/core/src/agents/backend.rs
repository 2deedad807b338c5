use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::*;

/// Failure of a single backend call.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CallError {
    /// 4xx: the request itself is bad; never retried.
    #[error("permanent failure (status {status}): {message}")]
    Permanent { status: u16, message: String },
    /// 5xx or timeout.
    #[error("retryable failure: {0}")]
    Retryable(String),
    /// Connection could not be established at all.
    #[error("backend unreachable: {0}")]
    Unreachable(String),
}

impl CallError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, CallError::Permanent { .. })
    }
}

pub type CallResult<T> = Result<T, CallError>;

/// One implementation of the wire protocol. Calls are blocking; implementations
/// must be shareable across worker threads.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn embed_text(&self, req: &EmbedTextRequest) -> CallResult<EmbedResponse>;
    fn embed_image(&self, req: &EmbedImageRequest) -> CallResult<EmbedResponse>;
    fn describe(&self, req: &DescribeRequest) -> CallResult<TextResponse>;
    fn revise(&self, req: &ReviseRequest) -> CallResult<ReviseResponse>;
    fn summarize(&self, req: &SummarizeRequest) -> CallResult<TextResponse>;
    fn complete(&self, req: &CompleteRequest) -> CallResult<TextResponse>;
}

/// Connection settings for one logical endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub name: String,
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}

impl BackendEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_in_flight: default_in_flight(),
        }
    }
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(250), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for the in-process mock and tests.
    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, base_delay: Duration::ZERO, factor: 2.0 }
    }

    pub fn max_attempts(&self) -> u32 {
        self.max_retries + 1
    }

    /// Delay before retry number `retry` (1-based), jittered into [0.5, 1.5) of nominal.
    pub fn delay(&self, retry: u32, jitter_seed: u64) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(retry as i32 - 1);
        let j: f64 = ChaCha8Rng::seed_from_u64(jitter_seed ^ retry as u64).random_range(0.5..1.5);
        Duration::from_secs_f64(nominal * j)
    }
}
