//! Wire transport: JSON over HTTP POST.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

use super::EndpointDescriptor;

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("{0}")]
    Other(String),
}

impl TransportError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_retriable(&self) -> bool {
        match self {
            Self::Status { code, .. } => *code == 429 || (500..600).contains(code),
            Self::Timeout | Self::Connect(_) => true,
            Self::Decode(_) | Self::Other(_) => false,
        }
    }
}

/// Something that can POST a JSON body to `<base_url>/<path>` and return the
/// JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        endpoint: &EndpointDescriptor,
        path: &str,
        body: &Value,
    ) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTransport").finish()
    }
}

impl HttpTransport {
    pub fn new() -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        endpoint: &EndpointDescriptor,
        path: &str,
        body: &Value,
    ) -> Result<Value, TransportError> {
        let url = format!("{}/{}", endpoint.base_url.trim_end_matches('/'), path);
        let mut req = self
            .client
            .post(url)
            .timeout(endpoint.timeout())
            .json(body);
        if let Some(var) = &endpoint.auth_env {
            if let Ok(token) = std::env::var(var) {
                req = req.bearer_auth(token);
            }
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else if e.is_connect() {
                TransportError::Connect(e.to_string())
            } else {
                TransportError::Other(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(TransportError::Status {
                code: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        resp.json::<Value>().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Decode(e.to_string())
            }
        })
    }
}
