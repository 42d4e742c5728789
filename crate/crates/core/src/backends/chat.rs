use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BackendCategory, BackendError, Result};
use crate::hirpg::{self, normalize_prompt};
use crate::seeding::stable_hash;

/// Environment variable holding the bearer token for [`HttpChat`].
pub const API_KEY_ENV: &str = "GENCL_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 1.0,
            max_tokens: None,
        }
    }
}

/// A chat-completion endpoint. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        (**self).complete(request)
    }
}

pub fn chat_complete(request: &ChatRequest, backend: &dyn ChatBackend) -> Result<String> {
    if request.system_text.trim().is_empty() {
        return Err(invalid("chat request needs a non-empty system text"));
    }
    Ok(backend.complete(request)?)
}

/// Deterministic offline stand-in for an LLM.
///
/// It reads the same messages a real model would see: the concept from the
/// user turn, and either the enumerated negatives of a recurrent request or
/// the prompt count of a flat request from the system turn.
#[derive(Debug, Clone, Copy)]
pub struct MockChat {
    pub seed: u64,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let concept = hirpg::parse_concept(&request.user_text).unwrap_or("object");
        if let Some(negatives) = hirpg::parse_system_prompt(&request.system_text) {
            return Ok(hirpg::mock_llm_generate(concept, &negatives, self.seed));
        }
        if let Some(n) = hirpg::parse_flat_request_count(&request.system_text) {
            let mut produced: Vec<String> = Vec::with_capacity(n);
            for _ in 0..n {
                let next = hirpg::mock_llm_generate(concept, &produced, self.seed);
                produced.push(next);
            }
            let lines: Vec<String> = produced
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{}. {p}", i + 1))
                .collect();
            return Ok(lines.join("\n"));
        }
        Ok(hirpg::mock_llm_generate(
            concept,
            std::slice::from_ref(&request.system_text),
            self.seed,
        ))
    }
}

/// Wraps a backend and keeps every request it forwards, in call order.
#[derive(Debug, Default)]
pub struct RecordingChat<B> {
    inner: B,
    log: Mutex<Vec<ChatRequest>>,
}

impl<B> RecordingChat<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("recording lock poisoned").clone()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingChat<B> {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        self.log
            .lock()
            .expect("recording lock poisoned")
            .push(request.clone());
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpChatConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Retries applied to rate-limit responses only.
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl HttpChatConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChat {
    config: HttpChatConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    content: Option<String>,
}

impl HttpChat {
    pub fn new(config: HttpChatConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: [
                WireMessage {
                    role: "system",
                    content: &request.system_text,
                },
                WireMessage {
                    role: "user",
                    content: &request.user_text,
                },
            ],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut call = self.agent.post(&self.endpoint());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::network(format!("reading body: {e}")))?;
        match status {
            200..=299 => {}
            429 => return Err(BackendError::rate_limit(format!("HTTP 429: {text}"))),
            _ => return Err(BackendError::protocol(format!("HTTP {status}: {text}"))),
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::protocol(format!("unparseable body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::protocol("response has no choices[0].message.content"))
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let mut attempt = 0u32;
        loop {
            match self.attempt(request) {
                Err(e)
                    if e.category == BackendCategory::RateLimit
                        && attempt < self.config.max_retries =>
                {
                    let wait = self.config.backoff_base * 2u32.pow(attempt);
                    warn!("rate limited, retrying in {wait:?}: {e}");
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => {
                    debug!("chat call finished after {} attempt(s)", attempt + 1);
                    return other;
                }
            }
        }
    }
}

// Used by the mock to decide whether a prompt is new.
pub(crate) fn collides_with(candidate: &str, negatives: &[String]) -> bool {
    let c = normalize_prompt(candidate);
    negatives.iter().any(|n| normalize_prompt(n) == c)
}

pub(crate) fn fallback_tag(negatives: &[String], seed: u64) -> String {
    let mut parts: Vec<String> = vec![seed.to_string()];
    parts.extend(negatives.iter().cloned());
    format!("{:016x}", stable_hash(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serves the given canned HTTP responses, one per connection, and
    /// returns the raw requests it received.
    fn serve(responses: Vec<String>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for reply in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let len = text[..head_end]
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= head_end + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                seen.push(String::from_utf8_lossy(&buf).into_owned());
                stream.write_all(reply.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn http_reply(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    fn client(base: String) -> HttpChat {
        let mut config = HttpChatConfig::new(base, "test-model");
        config.api_key = Some("sk-test".into());
        config.backoff_base = Duration::from_millis(1);
        config.timeout = Duration::from_secs(5);
        HttpChat::new(config)
    }

    #[test]
    fn http_reads_first_choice_and_sends_wire_body() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"A sketch of dog"}}]}"#;
        let (base, server) = serve(vec![http_reply("200 OK", body)]);
        let chat = client(base);
        let out = chat
            .complete(&ChatRequest::new("sys", "Concept: dog"))
            .unwrap();
        assert_eq!(out, "A sketch of dog");
        let raw = server.join().unwrap().remove(0);
        assert!(raw.starts_with("POST /v1/chat/completions"));
        assert!(raw
            .to_ascii_lowercase()
            .contains("authorization: bearer sk-test"));
        let json: serde_json::Value =
            serde_json::from_str(&raw[raw.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(json["model"], "test-model");
        assert_eq!(json["messages"][0]["role"], "system");
        assert_eq!(json["messages"][0]["content"], "sys");
        assert_eq!(json["messages"][1]["role"], "user");
        assert_eq!(json["temperature"], 1.0);
    }

    #[test]
    fn server_error_is_protocol_category() {
        let (base, server) = serve(vec![http_reply("500 Internal Server Error", "{}")]);
        let err = client(base)
            .complete(&ChatRequest::new("sys", "u"))
            .unwrap_err();
        assert_eq!(err.category, BackendCategory::Protocol);
        server.join().unwrap();
    }

    #[test]
    fn garbage_body_is_protocol_category() {
        let (base, server) = serve(vec![http_reply("200 OK", "not json")]);
        let err = client(base)
            .complete(&ChatRequest::new("sys", "u"))
            .unwrap_err();
        assert_eq!(err.category, BackendCategory::Protocol);
        server.join().unwrap();
    }

    #[test]
    fn rate_limit_is_retried_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#;
        let (base, server) = serve(vec![
            http_reply("429 Too Many Requests", "{}"),
            http_reply("429 Too Many Requests", "{}"),
            http_reply("200 OK", ok),
        ]);
        let out = client(base).complete(&ChatRequest::new("s", "u")).unwrap();
        assert_eq!(out, "fine");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn rate_limit_gives_up_after_retries() {
        let replies = (0..4)
            .map(|_| http_reply("429 Too Many Requests", "{}"))
            .collect();
        let (base, server) = serve(replies);
        let err = client(base)
            .complete(&ChatRequest::new("s", "u"))
            .unwrap_err();
        assert_eq!(err.category, BackendCategory::RateLimit);
        assert_eq!(server.join().unwrap().len(), 4);
    }

    #[test]
    fn unreachable_host_is_network_category() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = client(format!("http://{addr}"))
            .complete(&ChatRequest::new("s", "u"))
            .unwrap_err();
        assert_eq!(err.category, BackendCategory::Network);
    }

    #[test]
    fn mock_is_deterministic_and_avoids_negatives() {
        let chat = MockChat::new(1);
        let sys = hirpg::render_system_prompt(&["A photo of dog".to_string()]).unwrap();
        let req = ChatRequest::new(sys, hirpg::render_user_turn("dog"));
        let a = chat_complete(&req, &chat).unwrap();
        let b = chat_complete(&req, &chat).unwrap();
        assert_eq!(a, b);
        assert_ne!(normalize_prompt(&a), normalize_prompt("A photo of dog"));
        assert!(a.contains("dog"));
    }

    #[test]
    fn empty_system_text_is_rejected() {
        let err = chat_complete(&ChatRequest::new("  ", "u"), &MockChat::new(0)).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidArgument(_)));
    }

    #[test]
    fn recording_keeps_call_order() {
        let rec = RecordingChat::new(MockChat::new(3));
        rec.complete(&ChatRequest::new("one", "u")).unwrap();
        rec.complete(&ChatRequest::new("two", "u")).unwrap();
        let log = rec.requests();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].system_text, "one");
        assert_eq!(log[1].system_text, "two");
    }
}
