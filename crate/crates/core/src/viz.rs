//! Sankey documents for data trees and probed trees.
//!
//! Nodes are path-unique and numbered breadth-first from the seed (id 0).
//! Links out of one node are emitted in descending probability, ties by
//! ascending token id; a link's `depth` is the depth of its target.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data_tree::{DataTree, DataTreeNode};
use crate::gpt_tree::{GptTree, GptTreeNode};
use crate::tokenizer::{TokenId, Tokenizer, TokenizerError};

const SANKEY_JS: &str = include_str!("../assets/sankey.js");
pub const DEFAULT_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("tree uses tokenizer {tree}, got {given}")]
    TokenizerMismatch { tree: String, given: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("malformed sankey document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: usize,
    pub label: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: usize,
    pub target: usize,
    pub value: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SankeyDoc {
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SankeyOptions {
    /// Deepest link depth kept.
    pub max_depth: usize,
    /// Links kept per node, most probable first.
    pub max_children: usize,
    /// Links with a smaller probability are not drawn.
    pub floor: f64,
}

impl Default for SankeyOptions {
    fn default() -> Self {
        Self {
            max_depth: 5,
            max_children: 5,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// A tree whose edges carry conditional probabilities.
pub trait ProbTree {
    fn tokenizer_hash(&self) -> &str;
    /// The tree as probability nodes, cut at `max_depth`. `None` when empty.
    fn prob_root(&self, max_depth: usize) -> Option<GptTreeNode>;
}

impl ProbTree for GptTree {
    fn tokenizer_hash(&self) -> &str {
        &self.backend.tokenizer_hash
    }

    fn prob_root(&self, max_depth: usize) -> Option<GptTreeNode> {
        fn cut(n: &GptTreeNode, left: usize) -> GptTreeNode {
            GptTreeNode {
                token: n.token,
                prob: n.prob,
                children: if left == 0 {
                    Vec::new()
                } else {
                    n.children.iter().map(|c| cut(c, left - 1)).collect()
                },
            }
        }
        Some(cut(&self.root, max_depth))
    }
}

impl ProbTree for DataTree {
    fn tokenizer_hash(&self) -> &str {
        &self.meta.tokenizer_hash
    }

    fn prob_root(&self, max_depth: usize) -> Option<GptTreeNode> {
        fn conv(n: &DataTreeNode, prob: f64, left: usize) -> GptTreeNode {
            GptTreeNode {
                token: n.token,
                prob,
                children: if left == 0 {
                    Vec::new()
                } else {
                    n.ranked_children()
                        .into_iter()
                        .map(|c| conv(c, c.count as f64 / n.count as f64, left - 1))
                        .collect()
                },
            }
        }
        (!self.is_empty()).then(|| conv(&self.root, 1.0, max_depth))
    }
}

/// `#rrggbb` derived from the label, so equal labels share a color.
pub fn color_for(label: &str) -> String {
    let h = Sha256::digest(label.as_bytes());
    format!("#{:02x}{:02x}{:02x}", h[0], h[1], h[2])
}

pub fn tree_to_sankey<T: ProbTree + ?Sized>(
    tree: &T,
    tokenizer: &Tokenizer,
    opts: &SankeyOptions,
) -> Result<SankeyDoc, VizError> {
    if tree.tokenizer_hash() != tokenizer.hash() {
        return Err(VizError::TokenizerMismatch {
            tree: tree.tokenizer_hash().to_string(),
            given: tokenizer.hash().to_string(),
        });
    }
    let Some(root) = tree.prob_root(opts.max_depth) else {
        return Ok(SankeyDoc::default());
    };
    let mut doc = SankeyDoc::default();
    let push = |doc: &mut SankeyDoc, token: TokenId| -> Result<usize, VizError> {
        let label = tokenizer.label(token)?;
        let id = doc.nodes.len();
        doc.nodes.push(SankeyNode {
            id,
            color: color_for(&label),
            label,
        });
        Ok(id)
    };
    let root_id = push(&mut doc, root.token)?;
    let mut queue = VecDeque::from([(&root, root_id, 0usize)]);
    while let Some((node, id, depth)) = queue.pop_front() {
        let mut kids: Vec<&GptTreeNode> = node
            .children
            .iter()
            .filter(|c| c.prob > 0.0 && c.prob >= opts.floor)
            .collect();
        kids.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
        for c in kids.into_iter().take(opts.max_children) {
            let cid = push(&mut doc, c.token)?;
            doc.links.push(SankeyLink {
                source: id,
                target: cid,
                value: c.prob,
                depth: depth + 1,
            });
            queue.push_back((c, cid, depth + 1));
        }
    }
    Ok(doc)
}

/// Rebuilds the drawn tree from a document. Children come out in link
/// order.
pub fn sankey_to_tree(
    doc: &SankeyDoc,
    tokenizer: &Tokenizer,
) -> Result<Option<GptTreeNode>, VizError> {
    if doc.nodes.is_empty() {
        return Ok(None);
    }
    let n = doc.nodes.len();
    let mut kids: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut has_parent = vec![false; n];
    for (i, node) in doc.nodes.iter().enumerate() {
        if node.id != i {
            return Err(VizError::Malformed(format!("node {i} has id {}", node.id)));
        }
    }
    for l in &doc.links {
        if l.source >= n || l.target >= n || has_parent[l.target] {
            return Err(VizError::Malformed(format!(
                "bad link {} -> {}",
                l.source, l.target
            )));
        }
        has_parent[l.target] = true;
        kids[l.source].push((l.target, l.value));
    }
    if has_parent[0] || has_parent.iter().skip(1).any(|p| !p) {
        return Err(VizError::Malformed("node 0 must be the only root".into()));
    }
    fn build(
        id: usize,
        prob: f64,
        doc: &SankeyDoc,
        kids: &[Vec<(usize, f64)>],
        tok: &Tokenizer,
        seen: &mut usize,
    ) -> Result<GptTreeNode, VizError> {
        *seen += 1;
        let label = &doc.nodes[id].label;
        let token = tok
            .id_for_label(label)
            .ok_or_else(|| VizError::Malformed(format!("label {label:?} is not a token")))?;
        Ok(GptTreeNode {
            token,
            prob,
            children: kids[id]
                .iter()
                .map(|&(c, p)| build(c, p, doc, kids, tok, seen))
                .collect::<Result<_, _>>()?,
        })
    }
    let mut seen = 0;
    let root = build(0, 1.0, doc, &kids, tokenizer, &mut seen)?;
    if seen != n {
        return Err(VizError::Malformed("links contain a cycle".into()));
    }
    Ok(Some(root))
}

/// Standalone HTML page embedding `doc` and the vendored renderer.
pub fn render_html(doc: &SankeyDoc) -> String {
    let json = serde_json::to_string(doc)
        .expect("serializable")
        .replace('<', "\\u003c");
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>token tree</title>\n</head>\n<body>\n<div id=\"sankey\"></div>\n<script type=\"application/json\" id=\"sankey-data\">{json}</script>\n<script>\n{SANKEY_JS}</script>\n</body>\n</html>\n"
    )
}

/// Recovers the document embedded by [`render_html`].
pub fn doc_from_html(html: &str) -> Result<SankeyDoc, VizError> {
    let open = "id=\"sankey-data\">";
    let start = html
        .find(open)
        .ok_or_else(|| VizError::Malformed("no embedded document".into()))?
        + open.len();
    let end = html[start..]
        .find("</script>")
        .ok_or_else(|| VizError::Malformed("unterminated document".into()))?;
    serde_json::from_str(&html[start..start + end]).map_err(|e| VizError::Malformed(e.to_string()))
}
