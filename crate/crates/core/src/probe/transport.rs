use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum TransportError {
    /// Connection-level failure; worth retrying.
    #[error("network error: {0}")]
    Network(String),
    /// The backend answered with a non-success status.
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Network(_) => true,
            Self::Status { status, .. } => *status >= 500,
        }
    }
}

/// Moves request bodies to a backend and returns response bodies.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError>;
    fn get(&self, path: &str) -> Result<Vec<u8>, TransportError>;

    /// Human-readable location recorded in backend descriptors.
    fn endpoint(&self) -> String;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn finish(
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<Vec<u8>, TransportError> {
        let mut resp = resp.map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if (200..300).contains(&status) {
            Ok(body)
        } else {
            Err(TransportError::Status {
                status,
                body: String::from_utf8_lossy(&body).into_owned(),
            })
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let url = format!("{}{}", self.base, path);
        Self::finish(
            self.agent
                .post(&url)
                .header("content-type", "application/json")
                .send(body),
        )
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, TransportError> {
        let url = format!("{}{}", self.base, path);
        Self::finish(self.agent.get(&url).call())
    }

    fn endpoint(&self) -> String {
        self.base.clone()
    }
}
