//! Windowed co-occurrence counts of term pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::corpus::Chunk;
use crate::tokenizer::{TokenSeq, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub label: String,
    pub tokens: TokenSeq,
}

impl Term {
    /// Tokenizes `text`, refusing terms that are empty or fall back to the
    /// unknown token.
    pub fn parse(tokenizer: &Tokenizer, text: &str) -> Result<Self, AnalysisError> {
        let tokens = tokenizer.tokenize(text)?;
        if tokens.is_empty() || tokenizer.unk_id().is_some_and(|u| tokens.contains(&u)) {
            return Err(AnalysisError::UnknownTerm(text.to_string()));
        }
        Ok(Self {
            label: text.to_string(),
            tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub a: String,
    pub b: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurTable {
    pub window: usize,
    pub windows: u64,
    pub terms: Vec<String>,
    /// One entry per unordered pair `(a, b)` with `a` listed first in
    /// `terms`. For `a == b` the count is of windows holding the term twice.
    pub counts: Vec<PairCount>,
    /// Windows containing each term at least once.
    pub marginals: BTreeMap<String, u64>,
}

impl CooccurTable {
    /// Symmetric lookup by label.
    pub fn count(&self, a: &str, b: &str) -> Option<u64> {
        self.counts
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .map(|p| p.count)
    }
}

/// Slides a `window`-token window with stride 1 over each chunk (a chunk
/// shorter than the window is one window) and counts, for every term pair,
/// the windows that fully contain an occurrence of both.
pub fn cooccur<'a>(
    chunks: impl IntoIterator<Item = &'a Chunk>,
    terms: &[Term],
    window: usize,
) -> Result<CooccurTable, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::Empty("window must be at least 1"));
    }
    if let Some(t) = terms.iter().find(|t| t.tokens.is_empty()) {
        return Err(AnalysisError::UnknownTerm(t.label.clone()));
    }
    let k = terms.len();
    let mut pair = vec![vec![0u64; k]; k];
    let mut marginal = vec![0u64; k];
    let mut windows = 0u64;
    let mut present = vec![0u64; k];
    for chunk in chunks {
        let toks = &chunk.tokens;
        if toks.is_empty() {
            continue;
        }
        let w = window.min(toks.len());
        // prefix[i][s]: occurrences of term i starting before s
        let prefix: Vec<Vec<u64>> = terms
            .iter()
            .map(|t| {
                let mut acc = vec![0u64; toks.len() + 1];
                for s in 0..toks.len() {
                    acc[s + 1] = acc[s] + toks[s..].starts_with(&t.tokens) as u64;
                }
                acc
            })
            .collect();
        for start in 0..=toks.len() - w {
            windows += 1;
            for (i, t) in terms.iter().enumerate() {
                present[i] = if t.tokens.len() > w {
                    0
                } else {
                    let last = start + w - t.tokens.len();
                    prefix[i][last + 1] - prefix[i][start]
                };
                marginal[i] += (present[i] > 0) as u64;
            }
            for i in 0..k {
                if present[i] == 0 {
                    continue;
                }
                pair[i][i] += (present[i] >= 2) as u64;
                for j in i + 1..k {
                    pair[i][j] += (present[j] > 0) as u64;
                }
            }
        }
    }
    let mut counts = Vec::new();
    for i in 0..k {
        for j in i..k {
            counts.push(PairCount {
                a: terms[i].label.clone(),
                b: terms[j].label.clone(),
                count: pair[i][j],
            });
        }
    }
    Ok(CooccurTable {
        window,
        windows,
        terms: terms.iter().map(|t| t.label.clone()).collect(),
        counts,
        marginals: terms
            .iter()
            .zip(marginal)
            .map(|(t, m)| (t.label.clone(), m))
            .collect(),
    })
}
