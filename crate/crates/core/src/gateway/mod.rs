//! Uniform client for every remote model endpoint.
//!
//! Captioners, the extraction LLM and oracle members all speak one
//! message-list chat-completion contract; embedders use a text-list →
//! vector-list contract. Every request passes through per-endpoint
//! concurrency and rate budgets and is retried with exponential backoff on
//! transient failures. In `record` and `replay` modes replies are looked up
//! in (and in `record` mode appended to) a [`TranscriptStore`], so a recorded
//! run can be replayed byte-for-byte without network access.

mod budget;
pub mod mock;
mod transcript;
mod transport;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use budget::{ConcurrencyBudget, RateLimiter};
pub use transcript::{TranscriptEntry, TranscriptStore};
pub use transport::{HttpTransport, Transport, TransportError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("invalid endpoint {name:?}: {reason}")]
    InvalidDescriptor { name: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint {endpoint:?} failed after {attempts} attempts: {last}")]
    Exhausted {
        endpoint: String,
        attempts: u32,
        last: String,
    },
    #[error("endpoint {endpoint:?} rejected the request: {last}")]
    Rejected { endpoint: String, last: String },
    #[error("replay miss for endpoint {endpoint:?} (request {hash})")]
    ReplayMiss { endpoint: String, hash: String },
    #[error("malformed response from {endpoint:?}: {reason}")]
    MalformedResponse { endpoint: String, reason: String },
    #[error("cannot read image {path:?}: {source}")]
    Image {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("transcript store: {0}")]
    Transcript(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointRole {
    Captioner,
    Extractor,
    OracleMember,
    Embedder,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}

/// Static description of one remote endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub name: String,
    pub base_url: String,
    /// Model identifier sent on the wire; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding a bearer token, if the endpoint needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub role: EndpointRole,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

impl EndpointDescriptor {
    pub fn new(name: &str, base_url: &str, role: EndpointRole) -> Self {
        Self {
            name: name.to_string(),
            base_url: base_url.to_string(),
            model: None,
            auth_env: None,
            role,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_concurrency: default_concurrency(),
            requests_per_second: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |reason: &str| GatewayError::InvalidDescriptor {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.trim().is_empty() {
            return Err(bad("name must be non-empty"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(bad("timeout must be > 0"));
        }
        if self.max_concurrency == 0 {
            return Err(bad("concurrency must be >= 1"));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps.is_finite() && rps > 0.0) {
                return Err(bad("requests_per_second must be > 0"));
            }
        }
        Ok(())
    }

    pub fn wire_model(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    System,
    User,
    Assistant,
}

/// An image attached to a chat turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Url(String),
    Inline { media_type: String, data: Vec<u8> },
}

impl ImageSource {
    /// Interpret a dataset image locator: `http(s)://` and `data:` locators
    /// are passed through as URLs, anything else is read from disk.
    pub fn from_locator(locator: &str, base_dir: Option<&Path>) -> Result<Self, GatewayError> {
        if locator.starts_with("http://")
            || locator.starts_with("https://")
            || locator.starts_with("data:")
        {
            return Ok(Self::Url(locator.to_string()));
        }
        let path = match base_dir {
            Some(dir) => dir.join(locator),
            None => Path::new(locator).to_path_buf(),
        };
        let data = std::fs::read(&path).map_err(|source| GatewayError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let media_type = match ext.as_deref() {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        Ok(Self::Inline {
            media_type: media_type.to_string(),
            data,
        })
    }

    fn to_url(&self) -> String {
        match self {
            Self::Url(u) => u.clone(),
            Self::Inline { media_type, data } => format!(
                "data:{media_type};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(data)
            ),
        }
    }
}

/// One message in a chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: TurnRole,
    pub text: Option<String>,
    pub image: Option<ImageSource>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: TurnRole::System,
            text: Some(text.into()),
            image: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: TurnRole::User,
            text: Some(text.into()),
            image: None,
        }
    }

    pub fn user_with_image(text: impl Into<String>, image: ImageSource) -> Self {
        Self {
            role: TurnRole::User,
            text: Some(text.into()),
            image: Some(image),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: TurnRole::Assistant,
            text: Some(text.into()),
            image: None,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.text.is_none() && self.image.is_none() {
            return Err(GatewayError::InvalidRequest(
                "turn carries neither text nor image".into(),
            ));
        }
        if self.role == TurnRole::Assistant && self.image.is_some() {
            return Err(GatewayError::InvalidRequest(
                "assistant turns cannot carry images".into(),
            ));
        }
        Ok(())
    }

    fn to_wire(&self) -> Value {
        let role = match self.role {
            TurnRole::System => "system",
            TurnRole::User => "user",
            TurnRole::Assistant => "assistant",
        };
        match &self.image {
            None => json!({ "role": role, "content": self.text.clone().unwrap_or_default() }),
            Some(img) => {
                let mut parts = vec![json!({
                    "type": "image_url",
                    "image_url": { "url": img.to_url() }
                })];
                if let Some(t) = &self.text {
                    parts.push(json!({ "type": "text", "text": t }));
                }
                json!({ "role": role, "content": parts })
            }
        }
    }
}

/// Sampling parameters. Defaults are greedy and seeded for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 256,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// Always call the endpoint; no transcripts.
    #[default]
    Live,
    /// Serve from the transcript when possible, otherwise call and append.
    Record,
    /// Serve only from the transcript; a miss is an error.
    Replay,
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown mode {other:?} (expected live, record or replay)")),
        }
    }
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Live => "live",
            Self::Record => "record",
            Self::Replay => "replay",
        })
    }
}

/// Exponential backoff: `base * 2^retry`, capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(30));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Default)]
struct Counters {
    network_calls: AtomicUsize,
    transcript_hits: AtomicUsize,
    retries: AtomicUsize,
}

/// Snapshot of gateway activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub network_calls: usize,
    pub transcript_hits: usize,
    pub retries: usize,
}

struct EndpointSlot {
    descriptor: EndpointDescriptor,
    concurrency: ConcurrencyBudget,
    rate: Option<RateLimiter>,
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    endpoints: HashMap<String, EndpointSlot>,
    mode: GatewayMode,
    transcripts: Option<Arc<TranscriptStore>>,
    retry: RetryPolicy,
    counters: Counters,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.endpoints.keys().collect();
        names.sort();
        f.debug_struct("Gateway")
            .field("endpoints", &names)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        transport: Arc<dyn Transport>,
        descriptors: impl IntoIterator<Item = EndpointDescriptor>,
        mode: GatewayMode,
        transcripts: Option<Arc<TranscriptStore>>,
    ) -> Result<Self, GatewayError> {
        let mut endpoints = HashMap::new();
        for d in descriptors {
            d.validate()?;
            if endpoints.contains_key(&d.name) {
                return Err(GatewayError::InvalidDescriptor {
                    name: d.name.clone(),
                    reason: "duplicate endpoint name".into(),
                });
            }
            let slot = EndpointSlot {
                concurrency: ConcurrencyBudget::new(d.max_concurrency),
                rate: d.requests_per_second.map(RateLimiter::new),
                descriptor: d,
            };
            endpoints.insert(slot.descriptor.name.clone(), slot);
        }
        if mode != GatewayMode::Live && transcripts.is_none() {
            return Err(GatewayError::InvalidRequest(format!(
                "{mode} mode requires a transcript store"
            )));
        }
        Ok(Self {
            transport,
            endpoints,
            mode,
            transcripts,
            retry: RetryPolicy::default(),
            counters: Counters::default(),
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn descriptor(&self, name: &str) -> Result<&EndpointDescriptor, GatewayError> {
        self.slot(name).map(|s| &s.descriptor)
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            network_calls: self.counters.network_calls.load(Ordering::Relaxed),
            transcript_hits: self.counters.transcript_hits.load(Ordering::Relaxed),
            retries: self.counters.retries.load(Ordering::Relaxed),
        }
    }

    fn slot(&self, name: &str) -> Result<&EndpointSlot, GatewayError> {
        self.endpoints
            .get(name)
            .ok_or_else(|| GatewayError::UnknownEndpoint(name.to_string()))
    }

    /// Send a chat completion and return the first generated text.
    pub fn chat_complete(
        &self,
        endpoint: &str,
        turns: &[ChatTurn],
        decoding: &Decoding,
    ) -> Result<String, GatewayError> {
        let slot = self.slot(endpoint)?;
        if turns.is_empty() {
            return Err(GatewayError::InvalidRequest("no chat turns".into()));
        }
        for t in turns {
            t.validate()?;
        }
        let mut body = json!({
            "model": slot.descriptor.wire_model(),
            "messages": turns.iter().map(ChatTurn::to_wire).collect::<Vec<_>>(),
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        });
        if let Some(seed) = decoding.seed {
            body["seed"] = json!(seed);
        }
        self.exchange(slot, "chat/completions", body, |name, reply| {
            reply
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| GatewayError::MalformedResponse {
                    endpoint: name.to_string(),
                    reason: "missing choices[0].message.content".into(),
                })
        })
    }

    /// Ask a captioner to describe an image under `instruction`. Only
    /// surrounding whitespace is removed from the reply.
    pub fn generate_caption(
        &self,
        endpoint: &str,
        image: &ImageSource,
        instruction: &str,
        decoding: &Decoding,
    ) -> Result<String, GatewayError> {
        if instruction.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty instruction".into()));
        }
        let turn = ChatTurn::user_with_image(instruction, image.clone());
        self.chat_complete(endpoint, &[turn], decoding)
            .map(|s| s.trim().to_string())
    }

    /// Embed a list of texts, one vector per text.
    pub fn embed(&self, endpoint: &str, texts: &[&str]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let slot = self.slot(endpoint)?;
        let body = json!({ "model": slot.descriptor.wire_model(), "input": texts });
        let text = self.exchange(slot, "embeddings", body, |name, reply| {
            let malformed = |reason: &str| GatewayError::MalformedResponse {
                endpoint: name.to_string(),
                reason: reason.to_string(),
            };
            let data = reply
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing data array"))?;
            let vectors = data
                .iter()
                .map(|d| {
                    d.get("embedding")
                        .and_then(Value::as_array)
                        .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                        .ok_or_else(|| malformed("embedding is not a numeric array"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(serde_json::to_string(&vectors).expect("vectors serialize"))
        })?;
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
            endpoint: endpoint.to_string(),
            reason: e.to_string(),
        })
    }

    /// Transcript lookup, then (mode permitting) a budgeted, retried call.
    /// `extract` turns the raw JSON reply into the text stored in transcripts.
    fn exchange<F>(
        &self,
        slot: &EndpointSlot,
        path: &str,
        body: Value,
        extract: F,
    ) -> Result<String, GatewayError>
    where
        F: Fn(&str, &Value) -> Result<String, GatewayError>,
    {
        let name = slot.descriptor.name.as_str();
        let hash = request_hash(name, path, &body);
        if let Some(store) = &self.transcripts {
            if self.mode != GatewayMode::Live {
                if let Some(reply) = store.lookup(name, &hash) {
                    self.counters.transcript_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(reply);
                }
            }
        }
        if self.mode == GatewayMode::Replay {
            return Err(GatewayError::ReplayMiss {
                endpoint: name.to_string(),
                hash,
            });
        }
        let reply = self.send_with_retry(slot, path, &body)?;
        let text = extract(name, &reply)?;
        if self.mode == GatewayMode::Record {
            if let Some(store) = &self.transcripts {
                store
                    .append(TranscriptEntry {
                        endpoint: name.to_string(),
                        request_hash: hash,
                        request: body,
                        reply: text.clone(),
                    })
                    .map_err(GatewayError::Transcript)?;
            }
        }
        Ok(text)
    }

    fn send_with_retry(
        &self,
        slot: &EndpointSlot,
        path: &str,
        body: &Value,
    ) -> Result<Value, GatewayError> {
        let d = &slot.descriptor;
        let attempts = d.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.delay(attempt - 1);
                self.counters.retries.fetch_add(1, Ordering::Relaxed);
                debug!(endpoint = %d.name, attempt, ?delay, "retrying");
                std::thread::sleep(delay);
            }
            if let Some(rate) = &slot.rate {
                rate.wait_turn();
            }
            let result = {
                let _permit = slot.concurrency.acquire();
                self.counters.network_calls.fetch_add(1, Ordering::Relaxed);
                self.transport.post_json(d, path, body)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() => {
                    warn!(endpoint = %d.name, attempt, error = %e, "transient failure");
                    last = e.to_string();
                }
                Err(e) => {
                    return Err(GatewayError::Rejected {
                        endpoint: d.name.clone(),
                        last: e.to_string(),
                    })
                }
            }
        }
        Err(GatewayError::Exhausted {
            endpoint: d.name.clone(),
            attempts,
            last,
        })
    }
}

/// Content hash identifying a request in transcripts.
pub fn request_hash(endpoint: &str, path: &str, body: &Value) -> String {
    let canonical = json!({ "endpoint": endpoint, "path": path, "body": body });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

#[cfg(test)]
mod tests {
    use super::mock::{MockReply, MockTransport};
    use super::*;

    fn captioner(retries: u32) -> EndpointDescriptor {
        let mut d = EndpointDescriptor::new("cap", "http://mock", EndpointRole::Captioner);
        d.max_retries = retries;
        d
    }

    fn gateway(mock: &Arc<MockTransport>, retries: u32) -> Gateway {
        Gateway::new(mock.clone(), [captioner(retries)], GatewayMode::Live, None)
            .unwrap()
            .with_retry_policy(RetryPolicy::none())
    }

    fn image() -> ImageSource {
        ImageSource::Url("https://img.test/1.jpg".into())
    }

    #[test]
    fn scripted_reply_is_returned() {
        let mock = Arc::new(MockTransport::scripted(vec![MockReply::text("a dog on a couch")]));
        let gw = gateway(&mock, 0);
        let out = gw
            .chat_complete("cap", &[ChatTurn::user("hi")], &Decoding::default())
            .unwrap();
        assert_eq!(out, "a dog on a couch");
    }

    #[test]
    fn retries_until_success() {
        let mock = Arc::new(MockTransport::scripted(vec![
            MockReply::status(503),
            MockReply::Fail(TransportError::Timeout),
            MockReply::text("ok"),
        ]));
        let gw = gateway(&mock, 3);
        let out = gw
            .chat_complete("cap", &[ChatTurn::user("hi")], &Decoding::default())
            .unwrap();
        assert_eq!(out, "ok");
        assert_eq!(mock.calls(), 3);
        assert_eq!(gw.stats().retries, 2);
    }

    #[test]
    fn exhaustion_after_retries_plus_one_attempts() {
        let mock = Arc::new(MockTransport::scripted(vec![MockReply::status(500); 10]));
        let gw = gateway(&mock, 2);
        let err = gw
            .chat_complete("cap", &[ChatTurn::user("hi")], &Decoding::default())
            .unwrap_err();
        match err {
            GatewayError::Exhausted {
                endpoint, attempts, ..
            } => {
                assert_eq!(endpoint, "cap");
                assert_eq!(attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn non_retriable_status_fails_immediately() {
        let mock = Arc::new(MockTransport::scripted(vec![
            MockReply::status(401),
            MockReply::text("never"),
        ]));
        let gw = gateway(&mock, 5);
        let err = gw
            .chat_complete("cap", &[ChatTurn::user("hi")], &Decoding::default())
            .unwrap_err();
        assert!(matches!(err, GatewayError::Rejected { .. }));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn rate_limited_429_is_retried() {
        let mock = Arc::new(MockTransport::scripted(vec![
            MockReply::status(429),
            MockReply::text("fine"),
        ]));
        let gw = gateway(&mock, 1);
        assert_eq!(
            gw.chat_complete("cap", &[ChatTurn::user("x")], &Decoding::default())
                .unwrap(),
            "fine"
        );
    }

    #[test]
    fn caption_request_shape() {
        let mock = Arc::new(MockTransport::scripted(vec![MockReply::text("  a cat.  \n")]));
        let gw = gateway(&mock, 0);
        let cap = gw
            .generate_caption(
                "cap",
                &image(),
                "Provide a brief description of the given image.",
                &Decoding::default(),
            )
            .unwrap();
        assert_eq!(cap, "a cat.");
        let req = &mock.requests()[0];
        assert_eq!(req.path, "chat/completions");
        assert_eq!(req.body["temperature"], json!(0.0));
        assert_eq!(req.body["seed"], json!(0));
        let content = &req.body["messages"][0]["content"];
        assert_eq!(content[0]["image_url"]["url"], json!("https://img.test/1.jpg"));
        assert_eq!(
            content[1]["text"],
            json!("Provide a brief description of the given image.")
        );
        assert!(gw
            .generate_caption("cap", &image(), "  ", &Decoding::default())
            .is_err());
    }

    #[test]
    fn invalid_turns_and_descriptors() {
        let mock = Arc::new(MockTransport::scripted(vec![]));
        let gw = gateway(&mock, 0);
        let bad = ChatTurn {
            role: TurnRole::Assistant,
            text: None,
            image: Some(image()),
        };
        assert!(gw.chat_complete("cap", &[bad], &Decoding::default()).is_err());
        assert!(matches!(
            gw.chat_complete("nope", &[ChatTurn::user("x")], &Decoding::default()),
            Err(GatewayError::UnknownEndpoint(_))
        ));
        let mut d = captioner(0);
        d.max_concurrency = 0;
        assert!(d.validate().is_err());
        let mut d = captioner(0);
        d.timeout_secs = 0.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn backoff_is_nondecreasing_and_capped() {
        let p = RetryPolicy {
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(1),
        };
        let delays: Vec<_> = (0..40).map(|i| p.delay(i)).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(delays[0], Duration::from_millis(100));
        assert_eq!(delays[3], Duration::from_millis(800));
        assert_eq!(*delays.last().unwrap(), Duration::from_secs(1));
    }

    #[test]
    fn inline_image_from_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.png"), [1u8, 2, 3]).unwrap();
        let img = ImageSource::from_locator("x.png", Some(dir.path())).unwrap();
        assert_eq!(img.to_url(), "data:image/png;base64,AQID");
        assert!(ImageSource::from_locator("missing.jpg", Some(dir.path())).is_err());
    }

    #[test]
    fn embed_parses_vectors() {
        let mock = Arc::new(MockTransport::new(|req| {
            let n = req.body["input"].as_array().unwrap().len();
            MockReply::Json(json!({
                "data": (0..n).map(|i| json!({"embedding": [i as f64, 1.0]})).collect::<Vec<_>>()
            }))
        }));
        let d = EndpointDescriptor::new("emb", "http://mock", EndpointRole::Embedder);
        let gw = Gateway::new(mock, [d], GatewayMode::Live, None).unwrap();
        let v = gw.embed("emb", &["a", "b"]).unwrap();
        assert_eq!(v, vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn replay_requires_transcripts() {
        let mock = Arc::new(MockTransport::scripted(vec![]));
        assert!(Gateway::new(mock, [captioner(0)], GatewayMode::Replay, None).is_err());
    }
}
