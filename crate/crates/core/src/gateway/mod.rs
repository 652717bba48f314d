//! Uniform access to vision-language backends.
//!
//! A [`Gateway`] wraps one [`Backend`] with the behaviour every backend
//! shares: the image precondition, a cap on in-flight requests, retries with
//! exponential backoff and per-exchange latency capture. Two backends ship
//! with the crate: [`remote::RemoteBackend`] for chat-completion style HTTP
//! endpoints and [`mock::MockBackend`] which replays a scripted transcript.

pub mod mock;
pub mod remote;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Stage, Variant};
use crate::prompt::RenderedPrompt;

pub use mock::{load_script, parse_script, MockBackend, MockScript, ScriptEntry, ScriptKey};
pub use remote::RemoteBackend;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempt(s): {detail}")]
    TransportError { attempts: u32, detail: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("environment variable `{0}` holding the API token is not set")]
    AuthMissing(String),
    #[error("mock script has no entry for {0}")]
    ScriptMiss(String),
    #[error("prompt requires an image but none was supplied")]
    MissingImage,
    #[error("backend answered HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend response had no assistant text: {0}")]
    BadResponse(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> f64 {
    0.5
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Global cap on requests in flight through one gateway.
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    /// Mock only: path of the JSON-lines script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Mock only: extra delay added to every scripted reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_delay_ms: Option<u64>,
}

impl BackendConfig {
    pub fn mock(model_name: &str) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: model_name.to_string(),
            auth_env_var: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_secs: default_backoff(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            max_concurrent_requests: default_concurrency(),
            script: None,
            inject_delay_ms: None,
        }
    }

    pub fn remote(endpoint_url: &str, model_name: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint_url: Some(endpoint_url.to_string()),
            ..Self::mock(model_name)
        }
    }

    pub fn backend_id(&self) -> &str {
        &self.model_name
    }

    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if !(self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be non-negative");
        }
        if !(self.backoff_base_secs >= 0.0) {
            return bad("backoff_base_secs must be non-negative");
        }
        if self.max_concurrent_requests == 0 {
            return bad("max_concurrent_requests must be at least 1");
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name must not be empty");
        }
        if self.kind == BackendKind::Remote && self.endpoint_url.is_none() {
            return bad("remote backends need endpoint_url");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Delay before retry number `attempt + 1`: `backoff_base · 2^attempt`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(attempt as i32))
    }
}

/// Encoded image sent alongside a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

/// Everything a backend sees for one call.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub prompt: &'a RenderedPrompt,
    pub image: Option<&'a ImagePayload>,
    pub case_id: &'a str,
    pub variant: Variant,
}

/// Outcome of a single attempt, before retry policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Worth retrying: connection failures, 5xx, 429.
    Transport(String),
    Timeout,
    /// Retrying cannot help.
    Fatal(GatewayError),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn attempt(&self, request: &Request<'_>) -> Result<String, AttemptError>;
}

/// A completed model call. Append-only record; never mutated after creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExchange {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_id: Option<String>,
    #[serde(default)]
    pub repair_round: u32,
    pub request_text: String,
    pub image_attached: bool,
    pub response_text: String,
    /// Wall-clock seconds of the successful attempt.
    pub latency: f64,
    pub attempts: u32,
    pub backend_id: String,
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

/// Shareable handle applying retry, timeout and concurrency policy to a backend.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: BackendConfig,
    limiter: Arc<Limiter>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(config: BackendConfig, backend: Arc<dyn Backend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = Arc::new(Limiter::new(config.max_concurrent_requests));
        Ok(Self {
            backend,
            config,
            limiter,
        })
    }

    /// Builds the backend described by `config`. Relative script paths
    /// resolve against `base_dir`.
    pub fn from_config(config: &BackendConfig, base_dir: &Path) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Mock => {
                let script = config.script.as_ref().ok_or_else(|| {
                    GatewayError::Config("mock backends need a `script` path".into())
                })?;
                let path = if script.is_absolute() {
                    script.clone()
                } else {
                    base_dir.join(script)
                };
                let script = load_script(&path).map_err(|e| GatewayError::Config(e.to_string()))?;
                Arc::new(MockBackend::new(config.backend_id(), script, config.inject_delay_ms))
            }
            BackendKind::Remote => Arc::new(RemoteBackend::new(config)?),
        };
        Self::new(config.clone(), backend)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn query(&self, request: &Request<'_>) -> Result<ModelExchange, GatewayError> {
        let prompt = request.prompt;
        if prompt.attach_image && request.image.is_none_or(|i| i.bytes.is_empty()) {
            return Err(GatewayError::MissingImage);
        }
        let image = if prompt.attach_image { request.image } else { None };
        let request = Request { image, ..*request };

        let _permit = self.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            let outcome = self.backend.attempt(&request);
            let latency = started.elapsed().as_secs_f64();
            let attempts = attempt + 1;
            let retryable = match outcome {
                Ok(response_text) => {
                    return Ok(ModelExchange {
                        stage: prompt.stage,
                        concept_id: prompt.concept_id.clone(),
                        repair_round: prompt.repair_round,
                        request_text: prompt.text.clone(),
                        image_attached: image.is_some(),
                        response_text,
                        latency,
                        attempts,
                        backend_id: self.backend.id().to_string(),
                    })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Timeout) => GatewayError::Timeout { attempts },
                Err(AttemptError::Transport(detail)) => {
                    GatewayError::TransportError { attempts, detail }
                }
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            log::debug!(
                "{} attempt {attempts} failed for case {}: {retryable}",
                self.backend.id(),
                request.case_id
            );
            thread::sleep(self.config.backoff(attempt));
            attempt += 1;
        }
    }
}
