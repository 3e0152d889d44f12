//! Uniform interface to text-generation backends: live HTTP, deterministic
//! replay from recorded responses, and a scripted/synthesizing stub.
//!
//! Every request gets a deterministic fingerprint over the fields that
//! define the interaction (model, prompts, temperature, seed, schema hint).
//! Records are keyed by fingerprint, which is what makes replay a pure
//! function of the recorded run.

mod replay;
mod stub;

#[cfg(feature = "live-backend")]
mod http;

pub use replay::ReplayBackend;
pub use stub::{StubBackend, StubReply};

#[cfg(feature = "live-backend")]
pub use http::HttpBackend;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::timefmt::utc_now_rfc3339;

/// One model invocation to perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub response_schema_hint: Option<String>,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::Config("model_id must be non-empty".to_string()));
        }
        if self.system_prompt.is_empty() || self.user_prompt.is_empty() {
            return Err(GatewayError::Config("prompts must be non-empty".to_string()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::Config("max_output_tokens must be > 0".to_string()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Deterministic fingerprint over (model, prompts, temperature, seed,
    /// schema hint); stable across processes and platforms.
    pub fn fingerprint(&self) -> String {
        let temperature = format!("{:?}", self.temperature);
        let seed = match self.seed {
            Some(s) => format!("s{s}"),
            None => "n".to_string(),
        };
        let hint = match &self.response_schema_hint {
            Some(h) => format!("s{h}"),
            None => "n".to_string(),
        };
        sha256_hex(&[
            "request.v1",
            &self.model_id,
            &self.system_prompt,
            &self.user_prompt,
            &temperature,
            &seed,
            &hint,
        ])
    }
}

/// Per-run request parameters shared across pipeline stages.
/// Deterministic by default: temperature 0, fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDefaults {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl RequestDefaults {
    pub fn deterministic(model_id: &str) -> Self {
        RequestDefaults {
            model_id: model_id.to_string(),
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: Some(0),
        }
    }

    pub fn request(
        &self,
        system_prompt: &str,
        user_prompt: String,
        response_schema_hint: Option<String>,
    ) -> CompletionRequest {
        CompletionRequest {
            model_id: self.model_id.clone(),
            system_prompt: system_prompt.to_string(),
            user_prompt,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            response_schema_hint,
            seed: self.seed,
        }
    }
}

/// Token accounting as reported by a live backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// A backend's answer to one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub raw_text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub usage: Option<TokenUsage>,
}

/// Full provenance of one model invocation: the request, its fingerprint,
/// and what came back (or how it failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub request_fingerprint: String,
    pub request: CompletionRequest,
    pub outcome: RecordedOutcome,
    /// RFC 3339 wall-clock time for live calls; None for stub/replay so
    /// records stay byte-stable.
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordedOutcome {
    Success(CompletionResult),
    Failure { kind: String, message: String },
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { message: String, status: Option<u16>, attempts: u32 },
    #[error("request timed out after {attempts} attempt(s): {message}")]
    Timeout { message: String, attempts: u32 },
    #[error("replay miss: no recorded response for fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("replayed failure ({kind}): {message}")]
    RecordedFailure { kind: String, message: String },
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::Timeout { .. } => true,
            GatewayError::Transport { status, .. } => {
                matches!(status, None | Some(429)) || status.is_some_and(|s| s >= 500)
            }
            _ => false,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            GatewayError::Config(_) => "config",
            GatewayError::Transport { .. } => "transport",
            GatewayError::Timeout { .. } => "timeout",
            GatewayError::ReplayMiss { .. } => "replay_miss",
            GatewayError::RecordedFailure { .. } => "recorded_failure",
        }
    }
}

/// What a backend hands back to the gateway for one attempt. Replay
/// backends also return the original record so the gateway re-records it
/// verbatim.
pub struct BackendReply {
    pub result: Result<CompletionResult, GatewayError>,
    pub original_record: Option<RunRecord>,
}

impl BackendReply {
    pub fn fresh(result: Result<CompletionResult, GatewayError>) -> Self {
        BackendReply { result, original_record: None }
    }
}

/// A text-generation backend. Implementations must be shareable across
/// concurrent callers.
pub trait Backend: Send + Sync {
    fn execute(&self, request: &CompletionRequest, fingerprint: &str) -> BackendReply;

    /// True when results carry wall-clock provenance (live HTTP).
    fn is_live(&self) -> bool {
        false
    }
}

/// Exponential backoff policy. Retries apply only to transport-class
/// failures; schema-invalid content is a pipeline concern, not a gateway
/// one.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Policy for tests: same attempt budget, no sleeping.
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO, factor: 1.0 }
    }

    fn delay_before(&self, next_attempt: u32) -> Duration {
        // next_attempt is 2-based: the wait before attempt n is
        // base * factor^(n-2).
        let exponent = next_attempt.saturating_sub(2);
        self.base_delay.mul_f64(self.factor.powi(exponent as i32))
    }
}

/// Serializes request admission so a configured minimum interval holds
/// between consecutive acquisitions.
pub struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        RateLimiter { min_interval, last: Mutex::new(None) }
    }

    fn acquire(&self) {
        let mut last = self.last.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

/// The gateway: one backend plus retry, rate-limit, and record policy.
pub struct Gateway {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Gateway { backend, retry: RetryPolicy::default(), limiter: None }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, min_interval: Duration) -> Self {
        self.limiter = Some(RateLimiter::new(min_interval));
        self
    }

    /// Complete one request, returning only the result.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        self.complete_with_record(request).0
    }

    /// Complete one request and return the provenance record. The record
    /// is None only for errors that never reached a backend interaction
    /// (config errors, replay misses).
    pub fn complete_with_record(
        &self,
        request: &CompletionRequest,
    ) -> (Result<CompletionResult, GatewayError>, Option<RunRecord>) {
        if let Err(e) = request.validate() {
            return (Err(e), None);
        }
        let fingerprint = request.fingerprint();
        let mut attempt = 1u32;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let reply = self.backend.execute(request, &fingerprint);
            match reply.result {
                Ok(mut result) => {
                    // A replayed result is returned verbatim, original
                    // record included; fresh results get this attempt count.
                    if let Some(original) = reply.original_record {
                        if let RecordedOutcome::Success(stored) = &original.outcome {
                            return (Ok(stored.clone()), Some(original));
                        }
                        return (Ok(result), Some(original));
                    }
                    result.attempt_count = attempt;
                    let record = RunRecord {
                        request_fingerprint: fingerprint,
                        request: request.clone(),
                        outcome: RecordedOutcome::Success(result.clone()),
                        timestamp: self.backend.is_live().then(utc_now_rfc3339),
                    };
                    return (Ok(result), Some(record));
                }
                Err(err) => {
                    if let Some(original) = reply.original_record {
                        // Replayed failure: surface it without retrying.
                        return (Err(err), Some(original));
                    }
                    if matches!(err, GatewayError::ReplayMiss { .. } | GatewayError::Config(_)) {
                        return (Err(err), None);
                    }
                    if err.retryable() && attempt < self.retry.max_attempts {
                        attempt += 1;
                        let delay = self.retry.delay_before(attempt);
                        if !delay.is_zero() {
                            std::thread::sleep(delay);
                        }
                        continue;
                    }
                    let err = stamp_attempts(err, attempt);
                    let record = RunRecord {
                        request_fingerprint: fingerprint,
                        request: request.clone(),
                        outcome: RecordedOutcome::Failure {
                            kind: err.kind().to_string(),
                            message: err.to_string(),
                        },
                        timestamp: self.backend.is_live().then(utc_now_rfc3339),
                    };
                    return (Err(err), Some(record));
                }
            }
        }
    }

    /// Complete a batch with at most `parallelism` requests in flight.
    /// Results are positionally aligned with the input; individual
    /// failures never abort the batch.
    pub fn complete_many(
        &self,
        requests: &[CompletionRequest],
        parallelism: usize,
    ) -> Result<Vec<Result<CompletionResult, GatewayError>>, GatewayError> {
        Ok(self
            .complete_many_with_records(requests, parallelism)?
            .into_iter()
            .map(|(result, _)| result)
            .collect())
    }

    /// [`Gateway::complete_many`] with per-slot provenance records.
    pub fn complete_many_with_records(
        &self,
        requests: &[CompletionRequest],
        parallelism: usize,
    ) -> Result<Vec<(Result<CompletionResult, GatewayError>, Option<RunRecord>)>, GatewayError> {
        if parallelism == 0 {
            return Err(GatewayError::Config("parallelism must be >= 1".to_string()));
        }
        let workers = parallelism.min(requests.len()).max(1);
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<(Result<CompletionResult, GatewayError>, Option<RunRecord>)>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= requests.len() {
                        break;
                    }
                    let outcome = self.complete_with_record(&requests[idx]);
                    *slots[idx].lock().expect("slot poisoned") = Some(outcome);
                });
            }
        });
        Ok(slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("slot poisoned").expect("worker filled every slot"))
            .collect())
    }
}

fn stamp_attempts(err: GatewayError, attempts: u32) -> GatewayError {
    match err {
        GatewayError::Transport { message, status, .. } => {
            GatewayError::Transport { message, status, attempts }
        }
        GatewayError::Timeout { message, .. } => GatewayError::Timeout { message, attempts },
        other => other,
    }
}

#[cfg(test)]
pub(crate) fn test_request(user_prompt: &str) -> CompletionRequest {
    CompletionRequest {
        model_id: "stub-alpha".to_string(),
        system_prompt: "system".to_string(),
        user_prompt: user_prompt.to_string(),
        temperature: 0.0,
        max_output_tokens: 256,
        response_schema_hint: None,
        seed: Some(0),
    }
}
