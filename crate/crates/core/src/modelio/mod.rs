//! Uniform client for chat-completions inference servers: request/response
//! types, a backend trait with HTTP and mock implementations, assistant
//! prefill continuation, a content-addressed response cache, and a bounded
//! parallel driver.

mod cache;
mod http;
mod mock;

pub use cache::ResponseCache;
pub use http::{HttpBackend, HttpEndpoint, PrefillStrategy, RetryPolicy};
pub use mock::{MockBackend, ScriptRule};

use crate::domain::{validate_conversation, ChatMessage, DomainError, Role};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelIoError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed provider payload: {0}")]
    Protocol(String),
    #[error("endpoint cannot continue an assistant message: {0}")]
    PrefillUnsupported(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache I/O: {0}")]
    Cache(String),
}

impl From<DomainError> for ModelIoError {
    fn from(e: DomainError) -> Self {
        ModelIoError::InvalidRequest(e.to_string())
    }
}

/// Decoding parameters for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    /// Samples per request.
    pub n: u32,
    pub max_new_tokens: u32,
}

impl SamplingParams {
    /// Greedy single-sample decoding.
    pub fn greedy(max_new_tokens: u32) -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            top_k: None,
            repetition_penalty: 1.0,
            n: 1,
            max_new_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), ModelIoError> {
        let fail = |m: String| Err(ModelIoError::InvalidRequest(m));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return fail(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.top_p.is_nan() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return fail(format!("top_p must be in (0,1], got {}", self.top_p));
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                return fail("top_k must be positive".into());
            }
        }
        if self.repetition_penalty.is_nan() || self.repetition_penalty <= 0.0 {
            return fail(format!(
                "repetition_penalty must be > 0, got {}",
                self.repetition_penalty
            ));
        }
        if self.n == 0 {
            return fail("n must be positive".into());
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

/// One chat-completions request. When `prefill` is set, the backend asks the
/// server to continue that partial assistant turn, and completions contain
/// only the continuation text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<String>,
        messages: Vec<ChatMessage>,
        params: SamplingParams,
    ) -> Result<Self, ModelIoError> {
        params.validate()?;
        validate_conversation(&messages)?;
        Ok(ChatRequest { model_id: model_id.into(), messages, params, prefill: None, stop: None })
    }

    /// Attaches a partial assistant turn for the server to continue. The
    /// final message must not already be an assistant turn.
    pub fn with_prefill(mut self, prefill: impl Into<String>) -> Result<Self, ModelIoError> {
        if matches!(self.messages.last(), Some(m) if m.role == Role::Assistant) {
            return Err(ModelIoError::InvalidRequest(
                "prefill set but last message is already an assistant turn".into(),
            ));
        }
        self.prefill = Some(prefill.into());
        Ok(self)
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = Some(stop);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

/// Completions for one request, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub usage: Option<Usage>,
    /// Opaque provider payload kept for audit; absent for cache hits.
    pub raw: Option<serde_json::Value>,
}

/// A chat-completions backend. Implementations must be safe for concurrent
/// use; the pipeline drives them through [`run_bounded`].
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ModelIoError>;
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model_id: &'a str,
    messages: &'a [ChatMessage],
    params: &'a SamplingParams,
    prefill: &'a Option<String>,
    stop: &'a Option<Vec<String>>,
    sample_index: u32,
}

/// Stable content hash for one (request, sample index) pair. Any field
/// change produces a different key.
pub fn cache_key(request: &ChatRequest, sample_index: u32) -> String {
    let material = KeyMaterial {
        model_id: &request.model_id,
        messages: &request.messages,
        params: &request.params,
        prefill: &request.prefill,
        stop: &request.stop,
        sample_index,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex::encode(hasher.finalize())
}

/// Serves a request from the cache when every per-sample completion is
/// present; otherwise performs the network call and persists each completion
/// under its sample key.
pub fn cached_chat(
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    request: &ChatRequest,
) -> Result<ChatResponse, ModelIoError> {
    let n = request.params.n;
    let keys: Vec<String> = (0..n).map(|i| cache_key(request, i)).collect();
    let cached: Vec<Option<String>> = keys.iter().map(|k| cache.get(k)).collect();
    if cached.iter().all(Option::is_some) {
        cache.record_hit();
        return Ok(ChatResponse {
            completions: cached.into_iter().map(Option::unwrap).collect(),
            usage: None,
            raw: None,
        });
    }
    cache.record_miss();
    let response = backend.chat(request)?;
    if response.completions.len() != n as usize {
        return Err(ModelIoError::Protocol(format!(
            "expected {} completions, got {}",
            n,
            response.completions.len()
        )));
    }
    for (key, completion) in keys.iter().zip(&response.completions) {
        cache.put(key, &request.model_id, completion)?;
    }
    Ok(response)
}

/// Applies `f` to every item with at most `max_in_flight` invocations
/// running concurrently. Results come back in input order.
pub fn run_bounded<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    assert!(max_in_flight > 0, "max_in_flight must be positive");
    let workers = max_in_flight.min(items.len());
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    if items.is_empty() {
        return Vec::new();
    }
    let slots = Mutex::new(slots);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect()
}
