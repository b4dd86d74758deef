//! Deterministic scripted transport for tests and offline fixtures.
//!
//! The mock sits below the [`Gateway`](super::Gateway), so retries, budgets
//! and transcripts are exercised exactly as with a real server. It counts
//! calls and tracks the peak number of concurrent requests.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{EndpointDescriptor, Transport, TransportError};

/// What the mock answers for one request.
#[derive(Debug, Clone)]
pub enum MockReply {
    /// Wrapped in a chat-completion envelope.
    Text(String),
    /// Returned verbatim.
    Json(Value),
    Fail(TransportError),
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        Self::Text(s.into())
    }

    pub fn status(code: u16) -> Self {
        Self::Fail(TransportError::Status {
            code,
            body: format!("mock status {code}"),
        })
    }
}

/// A request as seen by the mock.
#[derive(Debug, Clone)]
pub struct MockRequest {
    pub endpoint: String,
    pub path: String,
    pub body: Value,
}

impl MockRequest {
    fn content_texts(msg: &Value) -> Vec<&str> {
        match msg.get("content") {
            Some(Value::String(s)) => vec![s.as_str()],
            Some(Value::Array(parts)) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect(),
            _ => vec![],
        }
    }

    /// Text of the last user message, if any.
    pub fn last_user_text(&self) -> Option<&str> {
        self.body
            .get("messages")?
            .as_array()?
            .iter()
            .rev()
            .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
            .and_then(|m| Self::content_texts(m).last().copied())
    }

    /// URL of the first attached image, if any.
    pub fn image_url(&self) -> Option<&str> {
        self.body
            .get("messages")?
            .as_array()?
            .iter()
            .filter_map(|m| m.get("content").and_then(Value::as_array))
            .flatten()
            .find_map(|p| p.pointer("/image_url/url").and_then(Value::as_str))
    }

    /// Texts of an embedding request.
    pub fn inputs(&self) -> Vec<&str> {
        self.body
            .get("input")
            .and_then(Value::as_array)
            .map(|xs| xs.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default()
    }
}

type Responder = Box<dyn Fn(&MockRequest) -> MockReply + Send + Sync>;

pub struct MockTransport {
    responder: Responder,
    latency: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    log: Mutex<Vec<MockRequest>>,
}

impl MockTransport {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&MockRequest) -> MockReply + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
            latency: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Answer requests from a fixed queue, in arrival order.
    pub fn scripted(replies: Vec<MockReply>) -> Self {
        let queue = Mutex::new(VecDeque::from(replies));
        Self::new(move |_| {
            queue
                .lock()
                .expect("mock script poisoned")
                .pop_front()
                .unwrap_or_else(|| MockReply::Fail(TransportError::Other("mock script exhausted".into())))
        })
    }

    /// A transport that fails the test if it is ever called.
    pub fn forbidden() -> Self {
        Self::new(|req| panic!("unexpected network call to {}/{}", req.endpoint, req.path))
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<MockRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }
}

impl Transport for MockTransport {
    fn post_json(
        &self,
        endpoint: &EndpointDescriptor,
        path: &str,
        body: &Value,
    ) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let req = MockRequest {
            endpoint: endpoint.name.clone(),
            path: path.to_string(),
            body: body.clone(),
        };
        self.log.lock().expect("mock log poisoned").push(req.clone());
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let reply = (self.responder)(&req);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        match reply {
            MockReply::Text(t) => Ok(json!({
                "choices": [{ "index": 0, "message": { "role": "assistant", "content": t } }]
            })),
            MockReply::Json(v) => Ok(v),
            MockReply::Fail(e) => Err(e),
        }
    }
}
