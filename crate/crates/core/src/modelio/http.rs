//! HTTP backend speaking the OpenAI-style chat-completions wire format,
//! with bounded exponential-backoff retries and two assistant-prefill
//! strategies (chat continuation, raw text completion).

use super::{ChatBackend, ChatRequest, ChatResponse, ModelIoError, Usage};
use crate::domain::{ChatMessage, ContentPart, ImageSource, Role};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

/// How an endpoint continues a partial assistant turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillStrategy {
    /// Chat protocol with a trailing assistant message and a
    /// continue-final-message flag (vLLM style).
    ChatContinue,
    /// Raw text-completion endpoint with a client-side-rendered template.
    TextCompletion,
    /// Server cannot continue assistant messages; prefill requests fail.
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay_ms: 1000, max_delay_ms: 30_000, jitter: true }
    }
}

impl RetryPolicy {
    fn delay(&self, failed_attempts: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << failed_attempts.min(16));
        let capped = exp.min(self.max_delay_ms);
        let ms = if self.jitter && capped > 1 {
            capped / 2 + rand::thread_rng().gen_range(0..=capped / 2)
        } else {
            capped
        };
        Duration::from_millis(ms)
    }
}

/// Connection settings for one inference server.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    /// API root, e.g. "http://localhost:8000/v1".
    pub base_url: String,
    /// Bearer token, already resolved from the environment.
    pub api_key: Option<String>,
    pub prefill_strategy: PrefillStrategy,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

pub struct HttpBackend {
    endpoint: HttpEndpoint,
    client: reqwest::blocking::Client,
    attempts: AtomicU64,
}

impl HttpBackend {
    pub fn new(endpoint: HttpEndpoint) -> Result<Self, ModelIoError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| ModelIoError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpBackend { endpoint, client, attempts: AtomicU64::new(0) })
    }

    /// Total HTTP attempts issued, including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    fn post_with_retry(&self, url: &str, body: &Value) -> Result<Value, ModelIoError> {
        let policy = &self.endpoint.retry;
        let mut failed = 0u32;
        loop {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.endpoint.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = req.send();
            let retryable_message = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| ModelIoError::Protocol(e.to_string()));
                    }
                    let body = resp.text().unwrap_or_default();
                    let message = format!("HTTP {status}: {}", truncate(&body, 400));
                    if status.as_u16() == 429 || status.is_server_error() {
                        message
                    } else {
                        return Err(ModelIoError::Transport {
                            attempts: failed + 1,
                            message,
                        });
                    }
                }
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => e.to_string(),
                Err(e) => {
                    return Err(ModelIoError::Transport {
                        attempts: failed + 1,
                        message: e.to_string(),
                    })
                }
            };
            failed += 1;
            if failed >= policy.max_attempts {
                return Err(ModelIoError::Transport {
                    attempts: failed,
                    message: retryable_message,
                });
            }
            std::thread::sleep(policy.delay(failed - 1));
        }
    }

    fn chat_body(&self, request: &ChatRequest, continue_final: bool) -> Value {
        let mut messages: Vec<Value> = request.messages.iter().map(wire_message).collect();
        if continue_final {
            if let Some(prefill) = &request.prefill {
                messages.push(wire_message(&ChatMessage::assistant(prefill.clone())));
            }
        }
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "repetition_penalty": request.params.repetition_penalty,
            "n": request.params.n,
            "max_tokens": request.params.max_new_tokens,
        });
        if let Some(k) = request.params.top_k {
            body["top_k"] = json!(k);
        }
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        if continue_final {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }

    fn completion_body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "prompt": render_prompt(request),
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "repetition_penalty": request.params.repetition_penalty,
            "n": request.params.n,
            "max_tokens": request.params.max_new_tokens,
        });
        if let Some(k) = request.params.top_k {
            body["top_k"] = json!(k);
        }
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ModelIoError> {
        let use_completion_api = match (&request.prefill, self.endpoint.prefill_strategy) {
            (None, _) => false,
            (Some(_), PrefillStrategy::ChatContinue) => false,
            (Some(_), PrefillStrategy::TextCompletion) => true,
            (Some(_), PrefillStrategy::Unsupported) => {
                return Err(ModelIoError::PrefillUnsupported(
                    "endpoint configured without a prefill strategy".into(),
                ))
            }
        };
        let (url, body, content_field) = if use_completion_api {
            (self.url("completions"), self.completion_body(request), ContentField::Text)
        } else {
            (
                self.url("chat/completions"),
                self.chat_body(request, request.prefill.is_some()),
                ContentField::Message,
            )
        };
        let payload = self.post_with_retry(&url, &body)?;
        let completions = extract_completions(&payload, content_field)?;
        let usage = payload.get("usage").map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64),
        });
        Ok(ChatResponse { completions, usage, raw: Some(payload) })
    }
}

#[derive(Clone, Copy)]
enum ContentField {
    Message,
    Text,
}

fn extract_completions(
    payload: &Value,
    field: ContentField,
) -> Result<Vec<String>, ModelIoError> {
    let choices = payload
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelIoError::Protocol("response missing choices array".into()))?;
    let mut indexed: Vec<(u64, String)> = Vec::with_capacity(choices.len());
    for (i, choice) in choices.iter().enumerate() {
        let text = match field {
            ContentField::Message => choice
                .get("message")
                .and_then(|m| m.get("content"))
                .and_then(Value::as_str),
            ContentField::Text => choice.get("text").and_then(Value::as_str),
        }
        .ok_or_else(|| ModelIoError::Protocol(format!("choice {i} missing content")))?;
        let index = choice.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
        indexed.push((index, text.to_string()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, t)| t).collect())
}

fn wire_message(message: &ChatMessage) -> Value {
    let role = message.role.to_string();
    let parts: Vec<Value> = message
        .content
        .iter()
        .map(|part| match part {
            ContentPart::Text { text } => json!({"type": "text", "text": text}),
            ContentPart::Image { source } => match source {
                ImageSource::Url(url) => {
                    json!({"type": "image_url", "image_url": {"url": url}})
                }
                ImageSource::Base64 { media_type, data } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{media_type};base64,{data}")}
                }),
            },
        })
        .collect();
    json!({"role": role, "content": parts})
}

/// Client-side chat template for raw text-completion endpoints. The final
/// assistant line carries the prefill and is left open for continuation.
fn render_prompt(request: &ChatRequest) -> String {
    let mut out = String::new();
    for message in &request.messages {
        let label = match message.role {
            Role::System => "System",
            Role::User => "User",
            Role::Assistant => "Assistant",
        };
        let mut text = String::new();
        for part in &message.content {
            match part {
                ContentPart::Text { text: t } => text.push_str(t),
                ContentPart::Image { .. } => text.push_str("<image>"),
            }
        }
        out.push_str(&format!("{label}: {text}\n"));
    }
    out.push_str("Assistant: ");
    if let Some(prefill) = &request.prefill {
        out.push_str(prefill);
    }
    out
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::SamplingParams;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// One-thread HTTP server that pops scripted (status, body) responses.
    fn serve_script(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen_bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut tmp = [0u8; 4096];
                let request_body;
                loop {
                    let n = stream.read(&mut tmp).unwrap();
                    buf.extend_from_slice(&tmp[..n]);
                    if let Some(pos) = find_header_end(&buf) {
                        let headers = String::from_utf8_lossy(&buf[..pos]).to_string();
                        let content_length = headers
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        let mut body_bytes = buf[pos + 4..].to_vec();
                        while body_bytes.len() < content_length {
                            let n = stream.read(&mut tmp).unwrap();
                            body_bytes.extend_from_slice(&tmp[..n]);
                        }
                        request_body = String::from_utf8_lossy(&body_bytes).to_string();
                        break;
                    }
                }
                seen_bodies.push(request_body);
                let reason = if status == 200 { "OK" } else { "Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen_bodies
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn find_header_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn endpoint(base_url: String, strategy: PrefillStrategy) -> HttpEndpoint {
        HttpEndpoint {
            base_url,
            api_key: None,
            prefill_strategy: strategy,
            retry: RetryPolicy {
                max_attempts: 5,
                base_delay_ms: 1,
                max_delay_ms: 4,
                jitter: false,
            },
            timeout: Duration::from_secs(5),
        }
    }

    fn request(n: u32) -> ChatRequest {
        let mut params = SamplingParams::greedy(32);
        params.n = n;
        ChatRequest::new("test-model", vec![ChatMessage::user("hello")], params).unwrap()
    }

    fn ok_chat_body(texts: &[&str]) -> String {
        let choices: Vec<Value> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"index": i, "message": {"content": t}}))
            .collect();
        json!({"choices": choices}).to_string()
    }

    #[test]
    fn retries_429_then_succeeds() {
        let (base, handle) = serve_script(vec![
            (429, "{}".into()),
            (429, "{}".into()),
            (200, ok_chat_body(&["X"])),
        ]);
        let backend = HttpBackend::new(endpoint(base, PrefillStrategy::ChatContinue)).unwrap();
        let response = backend.chat(&request(1)).unwrap();
        assert_eq!(response.completions, vec!["X"]);
        assert_eq!(backend.attempts(), 3);
        handle.join().unwrap();
    }

    #[test]
    fn exhausted_retries_report_transport_error() {
        let script = (0..3).map(|_| (500u16, "{}".to_string())).collect();
        let (base, handle) = serve_script(script);
        let mut ep = endpoint(base, PrefillStrategy::ChatContinue);
        ep.retry.max_attempts = 3;
        let backend = HttpBackend::new(ep).unwrap();
        match backend.chat(&request(1)) {
            Err(ModelIoError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn malformed_payload_is_protocol_error() {
        let (base, handle) = serve_script(vec![(200, json!({"nope": []}).to_string())]);
        let backend = HttpBackend::new(endpoint(base, PrefillStrategy::ChatContinue)).unwrap();
        assert!(matches!(backend.chat(&request(1)), Err(ModelIoError::Protocol(_))));
        handle.join().unwrap();
    }

    #[test]
    fn chat_continue_appends_assistant_turn() {
        let (base, handle) = serve_script(vec![(200, ok_chat_body(&[" continued"]))]);
        let backend = HttpBackend::new(endpoint(base, PrefillStrategy::ChatContinue)).unwrap();
        let req = request(1).with_prefill("<think> seed Wait,").unwrap();
        let response = backend.chat(&req).unwrap();
        assert_eq!(response.completions, vec![" continued"]);
        let bodies = handle.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["continue_final_message"], json!(true));
        assert_eq!(sent["add_generation_prompt"], json!(false));
        let last = sent["messages"].as_array().unwrap().last().unwrap().clone();
        assert_eq!(last["role"], "assistant");
        assert_eq!(last["content"][0]["text"], "<think> seed Wait,");
    }

    #[test]
    fn text_completion_renders_template() {
        let body = json!({"choices": [{"index": 0, "text": " more"}]}).to_string();
        let (base, handle) = serve_script(vec![(200, body)]);
        let backend = HttpBackend::new(endpoint(base, PrefillStrategy::TextCompletion)).unwrap();
        let req = ChatRequest::new(
            "test-model",
            vec![ChatMessage::user("caption question")],
            SamplingParams::greedy(32),
        )
        .unwrap()
        .with_prefill("<think> seed Hmm,")
        .unwrap();
        let response = backend.chat(&req).unwrap();
        assert_eq!(response.completions, vec![" more"]);
        let bodies = handle.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        let prompt = sent["prompt"].as_str().unwrap();
        assert!(prompt.starts_with("User: caption question\n"));
        assert!(prompt.ends_with("Assistant: <think> seed Hmm,"));
    }

    #[test]
    fn prefill_without_strategy_fails_fast() {
        let backend = HttpBackend::new(endpoint(
            "http://127.0.0.1:1".into(),
            PrefillStrategy::Unsupported,
        ))
        .unwrap();
        let req = request(1).with_prefill("<think> x").unwrap();
        assert!(matches!(backend.chat(&req), Err(ModelIoError::PrefillUnsupported(_))));
        assert_eq!(backend.attempts(), 0);
    }
}
