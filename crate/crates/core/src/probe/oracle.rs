//! A protocol backend that serves the exact conditional frequencies of one
//! or more data trees. It closes the loop between corpus statistics and
//! probed trees without a neural model in the way.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;

use super::protocol::*;
use super::transport::{Transport, TransportError};
use crate::data_tree::DataTree;
use crate::tokenizer::{TokenId, Tokenizer};

pub struct FrequencyOracle {
    model_id: String,
    tokenizer: Tokenizer,
    trees: BTreeMap<TokenId, DataTree>,
    context_window: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("tree for seed {seed} was built with tokenizer {found}, oracle uses {expected}")]
pub struct OracleTokenizerMismatch {
    pub seed: TokenId,
    pub expected: String,
    pub found: String,
}

impl FrequencyOracle {
    /// One tree per seed; later trees with the same seed replace earlier ones.
    pub fn new(
        model_id: impl Into<String>,
        tokenizer: Tokenizer,
        trees: impl IntoIterator<Item = DataTree>,
    ) -> Result<Self, OracleTokenizerMismatch> {
        let mut map = BTreeMap::new();
        for t in trees {
            if t.meta.tokenizer_hash != tokenizer.hash() {
                return Err(OracleTokenizerMismatch {
                    seed: t.seed,
                    expected: tokenizer.hash().to_string(),
                    found: t.meta.tokenizer_hash.clone(),
                });
            }
            map.insert(t.seed, t);
        }
        let context_window = map
            .values()
            .map(|t| t.meta.config.max_depth + 1)
            .max()
            .unwrap_or(1);
        Ok(Self {
            model_id: model_id.into(),
            tokenizer,
            trees: map,
            context_window,
        })
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.context_window = window;
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn info(&self) -> InfoResponse {
        InfoResponse {
            model: self.model_id.clone(),
            vocab_size: self.tokenizer.vocab_size(),
            context_window: self.context_window,
            tokenizer_hash: self.tokenizer.hash().to_string(),
        }
    }

    /// Top-`top_m` continuations of `context` as log-probabilities. An
    /// unobserved context returns no entries and all mass truncated.
    pub fn distribution(&self, context: &[TokenId], top_m: usize) -> NextTokenResponse {
        let node = context
            .first()
            .and_then(|s| self.trees.get(s))
            .and_then(|t| t.node(context).ok().flatten())
            .filter(|n| n.count > 0);
        let Some(node) = node else {
            return NextTokenResponse {
                entries: Vec::new(),
                truncated_logmass: 0.0,
            };
        };
        let total = node.count;
        let kept: Vec<_> = node.ranked_children().into_iter().take(top_m).collect();
        let returned: u64 = kept.iter().map(|c| c.count).sum();
        NextTokenResponse {
            entries: kept
                .iter()
                .map(|c| LogprobEntry {
                    token: c.token,
                    logprob: (c.count as f64 / total as f64).ln(),
                })
                .collect(),
            truncated_logmass: ((total - returned) as f64 / total as f64).ln(),
        }
    }

    pub fn generate(&self, prompt: &[TokenId], max_new: usize, stop: &[TokenId]) -> Vec<TokenId> {
        let mut context = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            let Some(next) = self
                .distribution(&context, 1)
                .entries
                .first()
                .map(|e| e.token)
            else {
                break;
            };
            if stop.contains(&next) {
                break;
            }
            out.push(next);
            context.push(next);
        }
        out
    }

    fn check_model(&self, model: &str) -> Result<(), TransportError> {
        if model == self.model_id {
            Ok(())
        } else {
            Err(error(404, format!("unknown model {model:?}")))
        }
    }

    fn route(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let out = match path {
            NEXT_TOKEN_PATH => {
                let req: NextTokenRequest = decode(body)?;
                self.check_model(&req.model)?;
                if req.context.is_empty() || req.top_m == 0 {
                    return Err(error(400, "context must be non-empty and top_m ≥ 1"));
                }
                if req.context.len() > self.context_window {
                    return Err(error(400, "context exceeds window"));
                }
                serde_json::to_vec(&self.distribution(&req.context, req.top_m))
            }
            GENERATE_PATH => {
                let req: GenerateRequest = decode(body)?;
                self.check_model(&req.model)?;
                serde_json::to_vec(&TokensResponse {
                    tokens: self.generate(&req.prompt, req.max_new, &req.stop),
                })
            }
            TOKENIZE_PATH => {
                let req: TokenizeRequest = decode(body)?;
                self.check_model(&req.model)?;
                let tokens = self
                    .tokenizer
                    .tokenize(&req.text)
                    .map_err(|e| error(400, e.to_string()))?;
                serde_json::to_vec(&TokensResponse { tokens })
            }
            DETOKENIZE_PATH => {
                let req: DetokenizeRequest = decode(body)?;
                self.check_model(&req.model)?;
                let text = self
                    .tokenizer
                    .detokenize(&req.tokens)
                    .map_err(|e| error(400, e.to_string()))?;
                serde_json::to_vec(&DetokenizeResponse { text })
            }
            _ => return Err(error(404, format!("no route {path}"))),
        };
        Ok(out.expect("response serializes"))
    }
}

fn error(status: u16, msg: impl Into<String>) -> TransportError {
    TransportError::Status {
        status,
        body: serde_json::to_string(&ErrorResponse { error: msg.into() }).unwrap(),
    }
}

fn decode<T: DeserializeOwned>(body: &[u8]) -> Result<T, TransportError> {
    serde_json::from_slice(body).map_err(|e| error(400, e.to_string()))
}

impl Transport for FrequencyOracle {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.route(path, body)
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, TransportError> {
        if path == INFO_PATH {
            Ok(serde_json::to_vec(&self.info()).unwrap())
        } else {
            Err(error(404, format!("no route {path}")))
        }
    }

    fn endpoint(&self) -> String {
        format!("oracle:{}", self.model_id)
    }
}
