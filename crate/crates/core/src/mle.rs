//! Numerical check that maximum-likelihood next-token distributions equal
//! the corpus conditional frequencies.
//!
//! Each context is fitted independently by gradient ascent on free scores
//! passed through a softmax. The objective is the count-weighted mean
//! log-likelihood `sum_w q(w) log p(w)` with `q = N(h,w) / N(h)`; its
//! gradient with respect to the scores is `q - p`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_tree::{DataTree, DataTreeNode};
use crate::tokenizer::TokenId;

pub const DEFAULT_LR: f64 = 0.5;
pub const DEFAULT_ITERS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MleError {
    #[error("iters must be at least 1")]
    ZeroIters,
    #[error("learning rate must be finite and positive, got {0}")]
    BadLearningRate(f64),
    #[error("context {0:?} has no positive count")]
    EmptyContext(String),
    #[error(
        "fit diverged on context {context:?} at iteration {iter}; try a smaller learning rate"
    )]
    Diverged { context: String, iter: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCounts {
    pub id: String,
    /// `N(h, w)` per continuation.
    pub counts: BTreeMap<TokenId, u64>,
}

impl ContextCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `N(h, w) / N(h)` per continuation.
    pub fn frequencies(&self) -> BTreeMap<TokenId, f64> {
        let total = self.total() as f64;
        self.counts
            .iter()
            .map(|(&w, &c)| (w, c as f64 / total))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MleProblem {
    pub contexts: Vec<ContextCounts>,
}

impl MleProblem {
    /// One context per data-tree node with children. The node's own count
    /// is not used: contexts cut at a chunk boundary carry no continuation.
    pub fn from_data_tree(tree: &DataTree) -> Self {
        fn go(n: &DataTreeNode, path: &mut Vec<TokenId>, out: &mut Vec<ContextCounts>) {
            path.push(n.token);
            if !n.children.is_empty() {
                out.push(ContextCounts {
                    id: path
                        .iter()
                        .map(|t| t.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                    counts: n.children.iter().map(|(&t, c)| (t, c.count)).collect(),
                });
            }
            for c in n.children.values() {
                go(c, path, out);
            }
            path.pop();
        }
        let mut contexts = Vec::new();
        go(&tree.root, &mut Vec::new(), &mut contexts);
        Self { contexts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFit {
    pub id: String,
    pub probs: BTreeMap<TokenId, f64>,
}

fn softmax(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Fits every context from uniform scores. Outcomes with zero count have a
/// strictly negative score gradient everywhere, so their supremum lies at
/// score `-inf`; they are pinned there and come out as exactly 0.
pub fn mle_fit(problem: &MleProblem, lr: f64, iters: usize) -> Result<Vec<ContextFit>, MleError> {
    if iters == 0 {
        return Err(MleError::ZeroIters);
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(MleError::BadLearningRate(lr));
    }
    problem
        .contexts
        .iter()
        .map(|ctx| fit_context(ctx, lr, iters))
        .collect()
}

fn fit_context(ctx: &ContextCounts, lr: f64, iters: usize) -> Result<ContextFit, MleError> {
    let total = ctx.total();
    if total == 0 {
        return Err(MleError::EmptyContext(ctx.id.clone()));
    }
    let live: Vec<(TokenId, f64)> = ctx
        .counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&w, &c)| (w, c as f64 / total as f64))
        .collect();
    let mut scores = vec![0.0; live.len()];
    let mut probs = vec![0.0; live.len()];
    for iter in 0..iters {
        softmax(&scores, &mut probs);
        let loglik: f64 = live.iter().zip(&probs).map(|((_, q), p)| q * p.ln()).sum();
        if !loglik.is_finite() || scores.iter().any(|s| !s.is_finite()) {
            return Err(MleError::Diverged {
                context: ctx.id.clone(),
                iter,
            });
        }
        for ((s, (_, q)), p) in scores.iter_mut().zip(&live).zip(&probs) {
            *s += lr * (q - p);
        }
    }
    softmax(&scores, &mut probs);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(MleError::Diverged {
            context: ctx.id.clone(),
            iter: iters,
        });
    }
    let mut out: BTreeMap<TokenId, f64> = ctx.counts.keys().map(|&w| (w, 0.0)).collect();
    for ((w, _), p) in live.iter().zip(&probs) {
        out.insert(*w, *p);
    }
    Ok(ContextFit {
        id: ctx.id.clone(),
        probs: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub passed: bool,
    pub tol: f64,
    pub lr: f64,
    pub iters: usize,
    pub contexts: usize,
    /// Largest `|p_fit(w|h) - N(h,w)/N(h)|` over all contexts.
    pub worst_deviation: f64,
    pub worst_context: Option<String>,
    pub worst_token: Option<TokenId>,
    pub error: Option<String>,
}

/// Runs [`mle_fit`] and checks every fitted probability against the
/// frequency closed form. Passing requires a deviation strictly below
/// `tol`, so `tol = 0` cannot pass.
pub fn mle_verify(problem: &MleProblem, tol: f64, lr: f64, iters: usize) -> MleReport {
    let mut report = MleReport {
        passed: false,
        tol,
        lr,
        iters,
        contexts: problem.contexts.len(),
        worst_deviation: 0.0,
        worst_context: None,
        worst_token: None,
        error: None,
    };
    let fits = match mle_fit(problem, lr, iters) {
        Ok(f) => f,
        Err(e) => {
            report.worst_deviation = f64::INFINITY;
            report.error = Some(e.to_string());
            return report;
        }
    };
    for (ctx, fit) in problem.contexts.iter().zip(&fits) {
        for (w, q) in ctx.frequencies() {
            let dev = (fit.probs[&w] - q).abs();
            if dev > report.worst_deviation || report.worst_context.is_none() {
                report.worst_deviation = dev;
                report.worst_context = Some(ctx.id.clone());
                report.worst_token = Some(w);
            }
        }
    }
    report.passed = report.worst_deviation < tol;
    report
}
