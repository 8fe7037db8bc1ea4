//! Alignment between a probed tree and a data tree: per-edge squared error
//! and top-k recall of the probed argmax.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data_tree::{DataTree, DataTreeNode};
use crate::gpt_tree::{GptTree, GptTreeNode, TreeShape};
use crate::tokenizer::TokenId;

pub const RECALL_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("tokenizer mismatch: probed tree uses {gpt}, data tree uses {data}")]
    TokenizerMismatch { gpt: String, data: String },
    #[error("seed mismatch: probed tree {gpt}, data tree {data}")]
    SeedMismatch { gpt: TokenId, data: TokenId },
    #[error("no probed context is covered by the data tree")]
    NoOverlap,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseStat {
    pub mse: f64,
    /// Edges whose context the data tree covers.
    pub compared: usize,
    /// Edges whose context the data tree never observed.
    pub uncovered: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallStat {
    pub recall: f64,
    /// Expanded probed nodes with a covered context.
    pub scored: usize,
    pub hits: usize,
    /// Expanded probed nodes whose context is unobserved.
    pub uncovered: usize,
}

/// Comparison of one probed tree against one data tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub mse: f64,
    pub recall_at_5: f64,
    pub nodes_compared: usize,
    pub nodes_uncovered: usize,
    pub shape: TreeShape,
    pub seeds: Vec<TokenId>,
    pub config_digest: String,
}

fn check(gpt: &GptTree, data: &DataTree) -> Result<(), MetricError> {
    if gpt.backend.tokenizer_hash != data.meta.tokenizer_hash {
        return Err(MetricError::TokenizerMismatch {
            gpt: gpt.backend.tokenizer_hash.clone(),
            data: data.meta.tokenizer_hash.clone(),
        });
    }
    if gpt.seed != data.seed {
        return Err(MetricError::SeedMismatch {
            gpt: gpt.seed,
            data: data.seed,
        });
    }
    Ok(())
}

/// Visits every probed node that has children, paired with the data-tree
/// node of the same context when that context was observed.
fn for_each_context<'a>(
    gpt: &'a GptTree,
    data: &'a DataTree,
    mut f: impl FnMut(&'a GptTreeNode, Option<&'a DataTreeNode>),
) {
    fn go<'a>(
        g: &'a GptTreeNode,
        d: Option<&'a DataTreeNode>,
        f: &mut impl FnMut(&'a GptTreeNode, Option<&'a DataTreeNode>),
    ) {
        if g.children.is_empty() {
            return;
        }
        let covered = d.filter(|n| n.count > 0);
        f(g, covered);
        for c in &g.children {
            go(c, covered.and_then(|n| n.children.get(&c.token)), f);
        }
    }
    go(&gpt.root, Some(&data.root), &mut f);
}

/// Mean of `(p_data - p_probed)^2` over edges of the probed tree whose
/// context the data tree covers. A continuation the corpus never showed
/// contributes `p_data = 0`.
pub fn tree_mse(gpt: &GptTree, data: &DataTree) -> Result<MseStat, MetricError> {
    check(gpt, data)?;
    let mut sum = 0.0;
    let mut compared = 0;
    let mut uncovered = 0;
    for_each_context(gpt, data, |g, d| match d {
        Some(d) => {
            for c in &g.children {
                let observed = d.children.get(&c.token).map_or(0, |n| n.count);
                let p_data = observed as f64 / d.count as f64;
                sum += (p_data - c.prob).powi(2);
                compared += 1;
            }
        }
        None => uncovered += g.children.len(),
    });
    if compared == 0 {
        return Err(MetricError::NoOverlap);
    }
    Ok(MseStat {
        mse: sum / compared as f64,
        compared,
        uncovered,
    })
}

/// Fraction of covered probed contexts whose most probable child is among
/// the data tree's `k` most frequent continuations.
pub fn tree_recall_at_k(
    gpt: &GptTree,
    data: &DataTree,
    k: usize,
) -> Result<RecallStat, MetricError> {
    check(gpt, data)?;
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let mut hits = 0;
    let mut scored = 0;
    let mut uncovered = 0;
    for_each_context(gpt, data, |g, d| match d {
        Some(d) => {
            let argmax = probed_argmax(g);
            scored += 1;
            if d.ranked_children()
                .iter()
                .take(k)
                .any(|c| c.token == argmax)
            {
                hits += 1;
            }
        }
        None => uncovered += 1,
    });
    if scored == 0 {
        return Err(MetricError::NoOverlap);
    }
    Ok(RecallStat {
        recall: hits as f64 / scored as f64,
        scored,
        hits,
        uncovered,
    })
}

/// Highest-probability child, lowest token id on ties.
fn probed_argmax(g: &GptTreeNode) -> TokenId {
    g.children
        .iter()
        .min_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)))
        .expect("caller passes expanded nodes")
        .token
}

pub fn compare(gpt: &GptTree, data: &DataTree) -> Result<DiffReport, MetricError> {
    let mse = tree_mse(gpt, data)?;
    let recall = tree_recall_at_k(gpt, data, RECALL_K)?;
    Ok(DiffReport {
        mse: mse.mse,
        recall_at_5: recall.recall,
        nodes_compared: mse.compared,
        nodes_uncovered: mse.uncovered,
        shape: gpt.shape,
        seeds: vec![gpt.seed],
        config_digest: config_digest(gpt, data),
    })
}

fn config_digest(gpt: &GptTree, data: &DataTree) -> String {
    let mut h = Sha256::new();
    h.update(gpt.backend.model_id.as_bytes());
    h.update([0]);
    h.update(gpt.backend.tokenizer_hash.as_bytes());
    h.update([0]);
    for v in [
        gpt.shape.depth,
        gpt.shape.branch,
        data.meta.config.max_depth,
    ] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(format!("{:?}", data.meta.config.mode).as_bytes());
    h.update(data.meta.corpus.to_string().as_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Per-seed rows plus their average, as emitted by a multi-seed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<DiffReport>,
    /// Unweighted mean of per-seed `mse` and `recall_at_5`; node counts are
    /// summed. `None` when no seed overlapped.
    pub average: Option<DiffReport>,
    /// Seeds skipped because their trees did not overlap.
    pub no_overlap: Vec<TokenId>,
}

impl ComparisonReport {
    pub fn new(rows: Vec<DiffReport>, no_overlap: Vec<TokenId>) -> Self {
        let average = (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            let mut digest = Sha256::new();
            for r in &rows {
                digest.update(r.config_digest.as_bytes());
            }
            DiffReport {
                mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
                recall_at_5: rows.iter().map(|r| r.recall_at_5).sum::<f64>() / n,
                nodes_compared: rows.iter().map(|r| r.nodes_compared).sum(),
                nodes_uncovered: rows.iter().map(|r| r.nodes_uncovered).sum(),
                shape: TreeShape {
                    depth: rows[0].shape.depth,
                    branch: rows[0].shape.branch,
                    node_count: rows.iter().map(|r| r.shape.node_count).sum(),
                },
                seeds: rows.iter().flat_map(|r| r.seeds.clone()).collect(),
                config_digest: hex::encode(&digest.finalize()[..16]),
            }
        });
        Self {
            rows,
            average,
            no_overlap,
        }
    }
}
