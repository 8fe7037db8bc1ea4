use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use super::cache::ProbeCache;
use super::protocol::*;
use super::transport::{Transport, TransportError};
use crate::tokenizer::{TokenId, TokenSeq};

/// Allowed deviation of a returned distribution's total mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("backend unreachable after {attempts} attempts: {source}")]
    Network {
        attempts: u32,
        source: TransportError,
    },
    #[error("backend rejected request ({status}): {message}")]
    Protocol { status: u16, message: String },
    #[error("context of {len} tokens exceeds the backend window of {window}")]
    ContextTooLong { len: usize, window: usize },
    #[error("tokenizer mismatch: expected {expected}, backend uses {found}")]
    TokenizerMismatch { expected: String, found: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
}

/// Identity of a probed backend, recorded in every tree built from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub endpoint: String,
    pub model_id: String,
    pub tokenizer_hash: String,
}

impl BackendDescriptor {
    /// Refuses comparisons across tokenizers.
    pub fn ensure_tokenizer(&self, expected: &str) -> Result<(), ProbeError> {
        if self.tokenizer_hash == expected {
            Ok(())
        } else {
            Err(ProbeError::TokenizerMismatch {
                expected: expected.to_string(),
                found: self.tokenizer_hash.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeRequest {
    pub context: TokenSeq,
    pub top_m: usize,
}

/// Next-token probabilities sorted descending (ties by ascending id) plus
/// the mass of every token not returned.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    pub entries: Vec<(TokenId, f64)>,
    pub truncated_mass: f64,
}

impl NextTokenDist {
    pub fn argmax(&self) -> Option<TokenId> {
        self.entries.first().map(|&(t, _)| t)
    }

    fn from_wire(resp: NextTokenResponse) -> Result<Self, ProbeError> {
        let mut entries = Vec::with_capacity(resp.entries.len());
        for e in resp.entries {
            let p = e.logprob.exp();
            if !(0.0..=1.0 + MASS_TOLERANCE).contains(&p) {
                return Err(ProbeError::Malformed(format!(
                    "token {} has logprob {}",
                    e.token, e.logprob
                )));
            }
            entries.push((e.token, p.min(1.0)));
        }
        sort_entries(&mut entries);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ProbeError::Malformed("duplicate token in entries".into()));
        }
        let truncated_mass = resp.truncated_logmass.exp();
        let total: f64 = entries.iter().map(|e| e.1).sum::<f64>() + truncated_mass;
        if !((1.0 - MASS_TOLERANCE)..=(1.0 + MASS_TOLERANCE)).contains(&total) {
            return Err(ProbeError::Malformed(format!(
                "distribution mass is {total}"
            )));
        }
        Ok(Self {
            entries,
            truncated_mass,
        })
    }
}

/// Probability descending, then token id ascending.
pub fn sort_entries(entries: &mut [(TokenId, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache: Option<ProbeCache>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            cache: None,
        }
    }
}

struct Limiter {
    max: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap();
        while *busy >= self.max {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for one model on a probe backend. Safe to share across threads;
/// at most `max_in_flight` requests are outstanding at once.
pub struct ProbeClient {
    transport: Arc<dyn Transport>,
    descriptor: BackendDescriptor,
    vocab_size: usize,
    context_window: usize,
    options: ClientOptions,
    limiter: Limiter,
    network_requests: AtomicU64,
    probes: AtomicU64,
}

impl ProbeClient {
    /// Queries `/v1/info` and binds the client to `model`.
    pub fn connect(
        transport: Arc<dyn Transport>,
        model: &str,
        options: ClientOptions,
    ) -> Result<Self, ProbeError> {
        let mut client = Self {
            descriptor: BackendDescriptor {
                endpoint: transport.endpoint(),
                model_id: model.to_string(),
                tokenizer_hash: String::new(),
            },
            transport,
            vocab_size: 0,
            context_window: usize::MAX,
            limiter: Limiter {
                max: options.max_in_flight.max(1),
                busy: Mutex::new(0),
                freed: Condvar::new(),
            },
            options,
            network_requests: AtomicU64::new(0),
            probes: AtomicU64::new(0),
        };
        let body = client.call(|t| t.get(INFO_PATH))?;
        let info: InfoResponse = parse(&body)?;
        if info.model != model {
            log::warn!(
                "backend reports model {:?}, probing {:?}",
                info.model,
                model
            );
        }
        client.descriptor.tokenizer_hash = info.tokenizer_hash;
        client.vocab_size = info.vocab_size;
        client.context_window = info.context_window;
        Ok(client)
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    /// Requests that reached the transport (retries included).
    pub fn network_requests(&self) -> u64 {
        self.network_requests.load(Ordering::SeqCst)
    }

    /// `next_token_dist` calls, cached or not.
    pub fn probe_calls(&self) -> u64 {
        self.probes.load(Ordering::SeqCst)
    }

    fn call<F>(&self, f: F) -> Result<Vec<u8>, ProbeError>
    where
        F: Fn(&dyn Transport) -> Result<Vec<u8>, TransportError>,
    {
        let policy = self.options.retry;
        let mut backoff = policy.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.network_requests.fetch_add(1, Ordering::SeqCst);
                f(self.transport.as_ref())
            };
            match result {
                Ok(body) => return Ok(body),
                Err(e) if e.is_retryable() && attempt < policy.attempts.max(1) => {
                    log::warn!("probe attempt {attempt} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(TransportError::Status { status, body }) if status < 500 => {
                    let message = serde_json::from_slice::<ErrorResponse>(body.as_bytes())
                        .map(|e| e.error)
                        .unwrap_or(body);
                    return Err(ProbeError::Protocol { status, message });
                }
                Err(source) => {
                    return Err(ProbeError::Network {
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }

    fn post<Req: Serialize>(&self, path: &str, req: &Req) -> Result<Vec<u8>, ProbeError> {
        let body = serde_json::to_vec(req).expect("request serializes");
        self.call(|t| t.post(path, &body))
    }

    pub fn next_token_dist(&self, req: &ProbeRequest) -> Result<NextTokenDist, ProbeError> {
        self.probes.fetch_add(1, Ordering::SeqCst);
        if req.context.is_empty() {
            return Err(ProbeError::InvalidRequest("context must be non-empty"));
        }
        if req.top_m == 0 {
            return Err(ProbeError::InvalidRequest("top_m must be at least 1"));
        }
        if req.context.len() > self.context_window {
            return Err(ProbeError::ContextTooLong {
                len: req.context.len(),
                window: self.context_window,
            });
        }
        let key = ProbeCache::key(&self.descriptor.model_id, &req.context, req.top_m);
        if let Some(cache) = &self.options.cache {
            if let Some(bytes) = cache.get(&key) {
                match parse::<NextTokenResponse>(&bytes).and_then(NextTokenDist::from_wire) {
                    Ok(dist) => return Ok(dist),
                    Err(e) => {
                        log::warn!("discarding corrupt cache entry {key}: {e}");
                        cache.remove(&key);
                    }
                }
            }
        }
        let body = self.post(
            NEXT_TOKEN_PATH,
            &NextTokenRequest {
                model: self.descriptor.model_id.clone(),
                context: req.context.clone(),
                top_m: req.top_m,
            },
        )?;
        let dist = NextTokenDist::from_wire(parse(&body)?)?;
        if let Some(cache) = &self.options.cache {
            cache.put(&key, &body);
        }
        Ok(dist)
    }

    /// Greedy continuation of `prompt`; the stop token itself is not returned.
    pub fn greedy_generate(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        stop: &[TokenId],
    ) -> Result<TokenSeq, ProbeError> {
        if max_new == 0 {
            return Err(ProbeError::InvalidRequest("max_new must be at least 1"));
        }
        if prompt.is_empty() {
            return Err(ProbeError::InvalidRequest("prompt must be non-empty"));
        }
        if prompt.len() > self.context_window {
            return Err(ProbeError::ContextTooLong {
                len: prompt.len(),
                window: self.context_window,
            });
        }
        let body = self.post(
            GENERATE_PATH,
            &GenerateRequest {
                model: self.descriptor.model_id.clone(),
                prompt: prompt.to_vec(),
                max_new,
                stop: stop.to_vec(),
            },
        )?;
        let resp: TokensResponse = parse(&body)?;
        if resp.tokens.len() > max_new {
            return Err(ProbeError::Malformed(format!(
                "generated {} tokens, asked for at most {max_new}",
                resp.tokens.len()
            )));
        }
        Ok(resp.tokens)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, ProbeError> {
        let body = self.post(
            TOKENIZE_PATH,
            &TokenizeRequest {
                model: self.descriptor.model_id.clone(),
                text: text.to_string(),
            },
        )?;
        Ok(parse::<TokensResponse>(&body)?.tokens)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, ProbeError> {
        let body = self.post(
            DETOKENIZE_PATH,
            &DetokenizeRequest {
                model: self.descriptor.model_id.clone(),
                tokens: tokens.to_vec(),
            },
        )?;
        Ok(parse::<DetokenizeResponse>(&body)?.text)
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ProbeError> {
    serde_json::from_slice(body).map_err(|e| ProbeError::Malformed(e.to_string()))
}
