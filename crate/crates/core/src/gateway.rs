//! Uniform access to chat-completion and embedding endpoints.
//!
//! Every model role in the pipeline — teacher and student policies, verifier,
//! weakness summarizer, screenshot reranker, query generator — talks through
//! the same seam: a list of role-tagged messages in, assistant text out. A
//! hosted server is reached over the chat-completions wire protocol; hermetic
//! runs swap in deterministic scripted transports. Retries, backoff, and the
//! per-endpoint in-flight bound live in [`ChatEndpoint`] so transports stay
//! single-attempt.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashutil;

/// Connection settings for one model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token; secrets
    /// never appear in config files.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    /// Base of the exponential backoff in milliseconds; 0 disables sleeping.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_max_retries() -> u32 {
    2
}
fn default_timeout_s() -> f64 {
    120.0
}
fn default_max_inflight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "scripted".into(),
            auth_token_env: None,
            max_retries: default_max_retries(),
            timeout_s: default_timeout_s(),
            max_inflight: default_max_inflight(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_inflight < 1 {
            return Err(GatewayError::Config("max_inflight must be at least 1".into()));
        }
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return Err(GatewayError::Config("timeout_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgRole {
    System,
    User,
    Assistant,
}

/// One part of a message: text, or a reference to a stored screenshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { screenshot_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: MsgRole,
    pub parts: Vec<ContentPart>,
}

impl Message {
    pub fn system(text: &str) -> Self {
        Message { role: MsgRole::System, parts: vec![ContentPart::Text { text: text.into() }] }
    }
    pub fn user(text: &str) -> Self {
        Message { role: MsgRole::User, parts: vec![ContentPart::Text { text: text.into() }] }
    }
    pub fn assistant(text: &str) -> Self {
        Message { role: MsgRole::Assistant, parts: vec![ContentPart::Text { text: text.into() }] }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Token accounting as reported by the backing server (zero for fakes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One completed request/response, kept for archival and debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<Message>,
    pub response_text: String,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway exhausted after {attempts} attempts: {last_error}")]
    Exhausted { attempts: u32, last_error: String },
    #[error("response failed schema validation ({error}); raw text attached: {raw}")]
    SchemaViolation { raw: String, error: String },
    #[error("endpoint config invalid: {0}")]
    Config(String),
    #[error("screenshot {0} could not be resolved")]
    UnresolvedImage(String),
}

/// A single-attempt transport. Retry policy is layered on top.
pub trait ChatTransport: Send + Sync {
    fn send(&self, messages: &[Message]) -> Result<String, String>;
}

/// Resolves a screenshot reference to its stored bytes.
pub trait ScreenshotResolver: Send + Sync {
    fn resolve(&self, screenshot_ref: &str) -> Option<Vec<u8>>;
}

/// Counting semaphore bounding concurrent requests per endpoint.
struct Inflight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Inflight {
    fn new(max: usize) -> Self {
        Inflight { slots: Mutex::new(max), freed: Condvar::new() }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut slots = self.slots.lock().expect("inflight lock");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("inflight wait");
        }
        *slots -= 1;
        InflightGuard { inner: self }
    }
}

struct InflightGuard<'a> {
    inner: &'a Inflight,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.inner.slots.lock().expect("inflight lock");
        *slots += 1;
        self.inner.freed.notify_one();
    }
}

/// A chat endpoint: transport plus retry/backoff/in-flight policy and an
/// instrumented attempt counter.
pub struct ChatEndpoint {
    config: EndpointConfig,
    transport: Arc<dyn ChatTransport>,
    inflight: Inflight,
    attempts: AtomicU64,
}

impl ChatEndpoint {
    pub fn new(
        config: EndpointConfig,
        transport: Arc<dyn ChatTransport>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let inflight = Inflight::new(config.max_inflight);
        Ok(ChatEndpoint { config, transport, inflight, attempts: AtomicU64::new(0) })
    }

    /// Convenience constructor for hermetic runs: default config, no backoff.
    pub fn scripted(transport: Arc<dyn ChatTransport>) -> Self {
        let config = EndpointConfig { backoff_base_ms: 0, ..EndpointConfig::default() };
        ChatEndpoint::new(config, transport).expect("default config is valid")
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Total attempts issued over the endpoint's lifetime.
    pub fn attempt_count(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Send with retries: up to `max_retries + 1` attempts with exponential
    /// backoff, holding one in-flight slot for the duration of each attempt.
    pub fn chat(&self, messages: &[Message]) -> Result<String, GatewayError> {
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 && self.config.backoff_base_ms > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let _slot = self.inflight.acquire();
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.transport.send(messages) {
                Ok(text) => return Ok(text),
                Err(e) => last_error = e,
            }
        }
        Err(GatewayError::Exhausted { attempts: self.config.max_retries + 1, last_error })
    }
}

/// Validate a reply against a caller-supplied structured-output parser, with
/// one automatic corrective re-prompt before giving up.
pub fn chat_structured<T>(
    endpoint: &ChatEndpoint,
    messages: &[Message],
    validate: impl Fn(&str) -> Result<T, String>,
) -> Result<T, GatewayError> {
    let first = endpoint.chat(messages)?;
    match validate(&first) {
        Ok(v) => Ok(v),
        Err(first_err) => {
            let mut retry = messages.to_vec();
            retry.push(Message::assistant(&first));
            retry.push(Message::user(&format!(
                "The previous reply failed schema validation: {first_err}. \
                 Return STRICT JSON only, matching the required schema exactly."
            )));
            let second = endpoint.chat(&retry)?;
            validate(&second).map_err(|error| GatewayError::SchemaViolation { raw: second, error })
        }
    }
}

/// Stable hash of a message list, used to key scripted replies and response
/// caches.
pub fn prompt_hash(messages: &[Message]) -> String {
    let mut parts: Vec<String> = Vec::new();
    for m in messages {
        parts.push(format!("{:?}", m.role));
        for p in &m.parts {
            match p {
                ContentPart::Text { text } => parts.push(text.clone()),
                ContentPart::Image { screenshot_ref } => {
                    parts.push(format!("img:{screenshot_ref}"))
                }
            }
        }
    }
    let joined: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
    hex::encode(hashutil::derive_bytes(&joined, 32))
}

/// Scripted transport: canned replies keyed by prompt hash.
#[derive(Default)]
pub struct ScriptedChat {
    replies: BTreeMap<String, String>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reply_to(mut self, messages: &[Message], reply: &str) -> Self {
        self.replies.insert(prompt_hash(messages), reply.to_string());
        self
    }
}

impl ChatTransport for ScriptedChat {
    fn send(&self, messages: &[Message]) -> Result<String, String> {
        self.replies
            .get(&prompt_hash(messages))
            .cloned()
            .ok_or_else(|| "no scripted reply for this prompt".to_string())
    }
}

/// Closure-backed transport for deterministic stand-in services.
pub struct FnChat<F>(pub F);

impl<F> ChatTransport for FnChat<F>
where
    F: Fn(&[Message]) -> Result<String, String> + Send + Sync,
{
    fn send(&self, messages: &[Message]) -> Result<String, String> {
        self.0(messages)
    }
}

/// Transport that fails its first `fail_times` sends, then delegates.
pub struct FlakyChat {
    remaining_failures: AtomicU32,
    inner: Arc<dyn ChatTransport>,
}

impl FlakyChat {
    pub fn new(fail_times: u32, inner: Arc<dyn ChatTransport>) -> Self {
        FlakyChat { remaining_failures: AtomicU32::new(fail_times), inner }
    }
}

impl ChatTransport for FlakyChat {
    fn send(&self, messages: &[Message]) -> Result<String, String> {
        let left = self.remaining_failures.load(Ordering::SeqCst);
        if left > 0 {
            self.remaining_failures.store(left - 1, Ordering::SeqCst);
            return Err("simulated endpoint failure".into());
        }
        self.inner.send(messages)
    }
}

/// Embedding endpoint seam.
pub trait Embedder: Send + Sync {
    /// Fixed-dimension feature vector for an image.
    fn embed(&self, image_bytes: &[u8]) -> Result<Vec<f32>, GatewayError>;
    fn dim(&self) -> usize;
}

const EMBED_BUCKETS: usize = 64;

/// Deterministic stand-in embedder: bucketed pixel intensity projected
/// through a seeded random matrix, L2-normalized. Similar images map to
/// nearby vectors, which is all the diversity selection needs.
pub struct HashProjectionEmbedder {
    dim: usize,
    projection: Vec<f32>,
}

impl HashProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection: Vec<f32> =
            (0..dim * EMBED_BUCKETS).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        HashProjectionEmbedder { dim, projection }
    }
}

impl Embedder for HashProjectionEmbedder {
    fn embed(&self, image_bytes: &[u8]) -> Result<Vec<f32>, GatewayError> {
        let mut buckets = [0.0f32; EMBED_BUCKETS];
        if !image_bytes.is_empty() {
            let stripe = image_bytes.len().div_ceil(EMBED_BUCKETS);
            for (i, chunk) in image_bytes.chunks(stripe).enumerate() {
                let sum: u64 = chunk.iter().map(|&b| b as u64).sum();
                buckets[i] = sum as f32 / (chunk.len() as f32 * 255.0);
            }
        }
        let mut out = vec![0.0f32; self.dim];
        for (d, slot) in out.iter_mut().enumerate() {
            let row = &self.projection[d * EMBED_BUCKETS..(d + 1) * EMBED_BUCKETS];
            *slot = row.iter().zip(buckets.iter()).map(|(p, b)| p * b).sum();
        }
        let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v /= norm;
            }
        }
        Ok(out)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "vector dimensions differ");
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

mod http {
    //! Chat-completions and embeddings over HTTP. Image parts are inlined as
    //! base64 data URLs resolved from the screenshot store.

    use super::*;
    use serde_json::{json, Value};

    pub struct HttpChatClient {
        client: reqwest::blocking::Client,
        config: EndpointConfig,
        resolver: Option<Arc<dyn ScreenshotResolver>>,
    }

    impl HttpChatClient {
        pub fn new(
            config: EndpointConfig,
            resolver: Option<Arc<dyn ScreenshotResolver>>,
        ) -> Result<Self, GatewayError> {
            config.validate()?;
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs_f64(config.timeout_s))
                .build()
                .map_err(|e| GatewayError::Config(e.to_string()))?;
            Ok(HttpChatClient { client, config, resolver })
        }

        fn auth_header(&self) -> Option<String> {
            let var = self.config.auth_token_env.as_deref()?;
            std::env::var(var).ok().map(|token| format!("Bearer {token}"))
        }

        fn render_part(&self, part: &ContentPart) -> Result<Value, String> {
            match part {
                ContentPart::Text { text } => Ok(json!({"type": "text", "text": text})),
                ContentPart::Image { screenshot_ref } => {
                    let bytes = self
                        .resolver
                        .as_ref()
                        .and_then(|r| r.resolve(screenshot_ref))
                        .ok_or_else(|| format!("unresolved screenshot {screenshot_ref}"))?;
                    let b64 = base64_encode(&bytes);
                    Ok(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{b64}")}
                    }))
                }
            }
        }
    }

    impl ChatTransport for HttpChatClient {
        fn send(&self, messages: &[Message]) -> Result<String, String> {
            let rendered: Result<Vec<Value>, String> = messages
                .iter()
                .map(|m| {
                    let role = match m.role {
                        MsgRole::System => "system",
                        MsgRole::User => "user",
                        MsgRole::Assistant => "assistant",
                    };
                    let parts: Result<Vec<Value>, String> =
                        m.parts.iter().map(|p| self.render_part(p)).collect();
                    Ok(json!({"role": role, "content": parts?}))
                })
                .collect();
            let body = json!({
                "model": self.config.model_name,
                "messages": rendered?,
                "stream": false,
            });
            let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
            let mut req = self.client.post(&url).json(&body);
            if let Some(auth) = self.auth_header() {
                req = req.header("Authorization", auth);
            }
            let resp = req.send().map_err(|e| e.to_string())?;
            let status = resp.status();
            let text = resp.text().map_err(|e| e.to_string())?;
            if !status.is_success() {
                return Err(format!("http {status}: {text}"));
            }
            let value: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            value["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| format!("missing choices[0].message.content in {text}"))
        }
    }

    pub struct HttpEmbedder {
        client: reqwest::blocking::Client,
        config: EndpointConfig,
        dim: usize,
    }

    impl HttpEmbedder {
        pub fn new(config: EndpointConfig, dim: usize) -> Result<Self, GatewayError> {
            config.validate()?;
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs_f64(config.timeout_s))
                .build()
                .map_err(|e| GatewayError::Config(e.to_string()))?;
            Ok(HttpEmbedder { client, config, dim })
        }
    }

    impl Embedder for HttpEmbedder {
        fn embed(&self, image_bytes: &[u8]) -> Result<Vec<f32>, GatewayError> {
            let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
            let body = json!({
                "model": self.config.model_name,
                "input": [base64_encode(image_bytes)],
            });
            let mut last_error = String::new();
            for _attempt in 0..=self.config.max_retries {
                let resp = self.client.post(&url).json(&body).send();
                match resp.and_then(|r| r.error_for_status()).and_then(|r| r.json::<Value>()) {
                    Ok(value) => {
                        let vec: Option<Vec<f32>> = value["data"][0]["embedding"]
                            .as_array()
                            .map(|a| {
                                a.iter().filter_map(|v| v.as_f64()).map(|v| v as f32).collect()
                            });
                        if let Some(v) = vec {
                            if v.len() == self.dim {
                                return Ok(v);
                            }
                            last_error = format!("embedding dim {} != {}", v.len(), self.dim);
                        } else {
                            last_error = "missing data[0].embedding".into();
                        }
                    }
                    Err(e) => last_error = e.to_string(),
                }
            }
            Err(GatewayError::Exhausted { attempts: self.config.max_retries + 1, last_error })
        }

        fn dim(&self) -> usize {
            self.dim
        }
    }

    const B64: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

    fn base64_encode(bytes: &[u8]) -> String {
        let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
        for chunk in bytes.chunks(3) {
            let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
            let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
            out.push(B64[(n >> 18) as usize & 63] as char);
            out.push(B64[(n >> 12) as usize & 63] as char);
            out.push(if chunk.len() > 1 { B64[(n >> 6) as usize & 63] as char } else { '=' });
            out.push(if chunk.len() > 2 { B64[n as usize & 63] as char } else { '=' });
        }
        out
    }

}

pub use http::{HttpChatClient, HttpEmbedder};

/// A policy served over the chat seam: the step context renders to a message
/// list (instruction, interleaved history, current screenshot) and the
/// assistant reply parses into a structured response.
pub struct ChatPolicy {
    endpoint: ChatEndpoint,
    format: crate::action::FormatConfig,
    system_prompt: String,
    /// `None` keeps every history screenshot; `Some(k)` keeps the last k.
    history_images_last_k: Option<u32>,
    /// Strip reasoning text from history turns (keeps contexts compact for
    /// small-context backends).
    strip_reasoning: bool,
    snapshot_id: String,
}

impl ChatPolicy {
    pub fn new(
        endpoint: ChatEndpoint,
        format: crate::action::FormatConfig,
        system_prompt: &str,
        history_images_last_k: Option<u32>,
        strip_reasoning: bool,
        snapshot_id: &str,
    ) -> Self {
        ChatPolicy {
            endpoint,
            format,
            system_prompt: system_prompt.to_string(),
            history_images_last_k,
            strip_reasoning,
            snapshot_id: snapshot_id.to_string(),
        }
    }

    fn history_text(&self, response: &crate::action::AgentResponse) -> String {
        if !self.strip_reasoning {
            return response.raw_text.clone();
        }
        crate::action::AgentResponse::new(
            "",
            &response.description,
            response.executions.clone(),
            &self.format,
        )
        .raw_text
    }

    /// Render a step context into the wire message list.
    pub fn messages_for(&self, ctx: &crate::trajectory::StepContext) -> Vec<Message> {
        let mut messages = vec![Message::system(&self.system_prompt)];
        let history_len = ctx.history.len();
        let image_cutoff = match self.history_images_last_k {
            Some(k) => history_len.saturating_sub(k as usize),
            None => 0,
        };
        for (i, step) in ctx.history.iter().enumerate() {
            let mut parts = vec![ContentPart::Text {
                text: format!("Step {}: the screen showed:", step.observation.step_index),
            }];
            if i >= image_cutoff {
                parts.push(ContentPart::Image {
                    screenshot_ref: step.observation.screenshot_ref.clone(),
                });
            }
            messages.push(Message { role: MsgRole::User, parts });
            messages.push(Message::assistant(&self.history_text(&step.response)));
        }
        messages.push(Message {
            role: MsgRole::User,
            parts: vec![
                ContentPart::Text {
                    text: format!(
                        "Task: {}\nCurrent screen (step {}):",
                        ctx.query, ctx.current_obs.step_index
                    ),
                },
                ContentPart::Image { screenshot_ref: ctx.current_obs.screenshot_ref.clone() },
            ],
        });
        messages
    }
}

impl crate::trajectory::PolicyClient for ChatPolicy {
    fn respond(
        &self,
        ctx: &crate::trajectory::StepContext,
    ) -> Result<crate::action::AgentResponse, crate::trajectory::PolicyError> {
        let messages = self.messages_for(ctx);
        let reply = self
            .endpoint
            .chat(&messages)
            .map_err(|e| crate::trajectory::PolicyError::Unavailable(e.to_string()))?;
        crate::action::parse_response(&reply, &self.format).map_err(|e| {
            crate::trajectory::PolicyError::Unavailable(format!("unparseable policy output: {e}"))
        })
    }

    fn policy_id(&self) -> String {
        format!("chat({}@{})", self.endpoint.config().model_name, self.snapshot_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn no_backoff() -> EndpointConfig {
        EndpointConfig { backoff_base_ms: 0, ..EndpointConfig::default() }
    }

    #[test]
    fn scripted_reply_by_prompt_hash() {
        let msgs = vec![Message::user("ping")];
        let transport = Arc::new(ScriptedChat::new().reply_to(&msgs, "pong"));
        let endpoint = ChatEndpoint::new(no_backoff(), transport).unwrap();
        assert_eq!(endpoint.chat(&msgs).unwrap(), "pong");
        assert!(endpoint.chat(&[Message::user("other")]).is_err());
    }

    #[test]
    fn exhausted_after_max_retries_plus_one() {
        struct AlwaysDown;
        impl ChatTransport for AlwaysDown {
            fn send(&self, _m: &[Message]) -> Result<String, String> {
                Err("down".into())
            }
        }
        let config = EndpointConfig { max_retries: 2, backoff_base_ms: 0, ..Default::default() };
        let endpoint = ChatEndpoint::new(config, Arc::new(AlwaysDown)).unwrap();
        let err = endpoint.chat(&[Message::user("x")]).unwrap_err();
        match err {
            GatewayError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(endpoint.attempt_count(), 3);
    }

    #[test]
    fn attempts_equal_min_failures_retries_plus_one() {
        for failures in 0..4u32 {
            let msgs = vec![Message::user("q")];
            let inner = Arc::new(ScriptedChat::new().reply_to(&msgs, "a"));
            let transport = Arc::new(FlakyChat::new(failures, inner));
            let config =
                EndpointConfig { max_retries: 2, backoff_base_ms: 0, ..Default::default() };
            let endpoint = ChatEndpoint::new(config, transport).unwrap();
            let _ = endpoint.chat(&msgs);
            assert_eq!(endpoint.attempt_count(), failures.min(2) as u64 + 1);
        }
    }

    #[test]
    fn structured_output_reprompts_once_then_fails() {
        // Transport always returns prose, never JSON.
        let transport = Arc::new(FnChat(|_m: &[Message]| Ok("not json at all".to_string())));
        let endpoint = ChatEndpoint::new(no_backoff(), transport).unwrap();
        let result: Result<serde_json::Value, _> =
            chat_structured(&endpoint, &[Message::user("verdict?")], |raw| {
                serde_json::from_str(raw).map_err(|e| e.to_string())
            });
        match result {
            Err(GatewayError::SchemaViolation { raw, .. }) => assert_eq!(raw, "not json at all"),
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
        assert_eq!(endpoint.attempt_count(), 2);
    }

    #[test]
    fn structured_output_recovers_on_reprompt() {
        let calls = AtomicU32::new(0);
        let transport = Arc::new(FnChat(move |_m: &[Message]| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Ok("oops".to_string())
            } else {
                Ok("{\"ok\":true}".to_string())
            }
        }));
        let endpoint = ChatEndpoint::new(no_backoff(), transport).unwrap();
        let value: serde_json::Value =
            chat_structured(&endpoint, &[Message::user("verdict?")], |raw| {
                serde_json::from_str(raw).map_err(|e| e.to_string())
            })
            .unwrap();
        assert_eq!(value["ok"], true);
    }

    #[test]
    fn inflight_bound_is_respected() {
        use std::sync::atomic::AtomicI32;
        static CURRENT: AtomicI32 = AtomicI32::new(0);
        static PEAK: AtomicI32 = AtomicI32::new(0);

        struct Slow;
        impl ChatTransport for Slow {
            fn send(&self, _m: &[Message]) -> Result<String, String> {
                let now = CURRENT.fetch_add(1, Ordering::SeqCst) + 1;
                PEAK.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                CURRENT.fetch_sub(1, Ordering::SeqCst);
                Ok("ok".into())
            }
        }
        let config = EndpointConfig { max_inflight: 2, backoff_base_ms: 0, ..Default::default() };
        let endpoint = Arc::new(ChatEndpoint::new(config, Arc::new(Slow)).unwrap());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let ep = Arc::clone(&endpoint);
                std::thread::spawn(move || ep.chat(&[Message::user("x")]).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(PEAK.load(Ordering::SeqCst) <= 2, "peak {}", PEAK.load(Ordering::SeqCst));
    }

    #[test]
    fn fake_embedder_is_deterministic_and_shaped() {
        let e = HashProjectionEmbedder::new(16, 7);
        let a = e.embed(b"image-bytes-one").unwrap();
        let b = e.embed(b"image-bytes-one").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let c = e.embed(b"a completely different rendering").unwrap();
        assert!(cosine_similarity(&a, &c) < 1.0);
        // Unit norm.
        let n: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    /// Minimal canned chat-completions server on a loopback socket.
    fn canned_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 65536];
                let mut read = 0;
                loop {
                    let n = stream.read(&mut buf[read..]).unwrap();
                    read += n;
                    let text = String::from_utf8_lossy(&buf[..read]);
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let content_length = text
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if read >= header_end + 4 + content_length {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reason = if status == 200 { "OK" } else { "Server Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn chat_policy_builds_history_and_parses_reply() {
        use crate::action::{AgentResponse, FormatConfig, ToolCall};
        use crate::trajectory::{Observation, PolicyClient, StepContext, TrajStep};

        let canned = "Reasoning: target located\nAction: press it\nExecution:\nClick(455,75)";
        let transport = Arc::new(FnChat(move |_m: &[Message]| Ok(canned.to_string())));
        let policy = ChatPolicy::new(
            ChatEndpoint::scripted(transport),
            FormatConfig::default(),
            "You operate a desktop.",
            Some(1),
            true,
            "snap-1",
        );

        let fmt = FormatConfig::default();
        let ctx = StepContext {
            query: "press the button".into(),
            current_obs: Observation { step_index: 3, screenshot_ref: "cur".into(), feature_vec: None },
            history: vec![
                TrajStep {
                    observation: Observation { step_index: 1, screenshot_ref: "h1".into(), feature_vec: None },
                    response: AgentResponse::new("secret thoughts", "move", vec![ToolCall::coord("MoveTo", 1, 1)], &fmt),
                },
                TrajStep {
                    observation: Observation { step_index: 2, screenshot_ref: "h2".into(), feature_vec: None },
                    response: AgentResponse::new("more thoughts", "hover", vec![ToolCall::coord("MoveTo", 2, 2)], &fmt),
                },
            ],
        };

        let messages = policy.messages_for(&ctx);
        // system + 2x(user, assistant) + final user
        assert_eq!(messages.len(), 6);
        // Only the last history step keeps its image under last_k = 1.
        let images = |m: &Message| {
            m.parts.iter().filter(|p| matches!(p, ContentPart::Image { .. })).count()
        };
        assert_eq!(images(&messages[1]), 0);
        assert_eq!(images(&messages[3]), 1);
        assert_eq!(images(&messages[5]), 1);
        // Reasoning is stripped from history turns.
        assert!(!messages[2].text().contains("secret thoughts"));
        assert!(messages[2].text().contains("MoveTo(1,1)"));

        let response = policy.respond(&ctx).unwrap();
        assert_eq!(response.executions, vec![ToolCall::coord("Click", 455, 75)]);
        assert_eq!(policy.policy_id(), "chat(scripted@snap-1)");
    }

    #[test]
    fn http_client_parses_and_retries() {
        let ok_body = serde_json::json!({
            "choices": [{"index": 0, "message": {"role": "assistant", "content": "hello"}}],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1}
        })
        .to_string();
        let (url, handle) =
            canned_server(vec![(500, "{\"error\":\"boom\"}".into()), (200, ok_body)]);
        let config = EndpointConfig {
            base_url: url,
            max_retries: 2,
            backoff_base_ms: 0,
            timeout_s: 5.0,
            ..Default::default()
        };
        let client = Arc::new(HttpChatClient::new(config.clone(), None).unwrap());
        let endpoint = ChatEndpoint::new(config, client).unwrap();
        let reply = endpoint.chat(&[Message::user("hi")]).unwrap();
        assert_eq!(reply, "hello");
        assert_eq!(endpoint.attempt_count(), 2);
        handle.join().unwrap();
    }
}
