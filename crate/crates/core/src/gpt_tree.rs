//! Top-K, depth-T probability trie obtained by probing a model breadth-first.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, Kind, Reader, Writer};
use crate::probe::{BackendDescriptor, ProbeClient, ProbeError, ProbeRequest};
use crate::tokenizer::TokenId;

pub const DEFAULT_DEPTH: usize = 5;
pub const DEFAULT_BRANCH: usize = 5;
/// Continuations below this probability are treated as absent.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GptTreeError {
    #[error("depth and branch must both be at least 1")]
    BadShape,
    #[error("probing failed{}: {source}", checkpoint.as_ref().map(|p| format!(" (progress saved to {})", p.display())).unwrap_or_default())]
    Backend {
        source: ProbeError,
        checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path} does not match this run: {reason}")]
    StaleCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint io on {path}: {message}")]
    CheckpointIo { path: PathBuf, message: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid tree JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    #[serde(rename = "T")]
    pub depth: usize,
    #[serde(rename = "K")]
    pub branch: usize,
    pub node_count: usize,
}

impl TreeShape {
    /// `(K^(T+1) - 1) / (K - 1)`, the node count of a complete expansion.
    pub fn max_nodes(depth: usize, branch: usize) -> u128 {
        if branch == 1 {
            return depth as u128 + 1;
        }
        let k = branch as u128;
        (k.pow(depth as u32 + 1) - 1) / (k - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptTreeNode {
    pub token: TokenId,
    /// Probability of `token` given the path above it (1 at the root).
    pub prob: f64,
    pub children: Vec<GptTreeNode>,
}

impl GptTreeNode {
    fn count(&self) -> usize {
        1 + self.children.iter().map(Self::count).sum::<usize>()
    }

    /// Calls `f(path, node)` for every node in preorder.
    pub fn walk<'a>(
        &'a self,
        path: &mut Vec<TokenId>,
        f: &mut impl FnMut(&[TokenId], &'a GptTreeNode),
    ) {
        path.push(self.token);
        f(path, self);
        for c in &self.children {
            c.walk(path, f);
        }
        path.pop();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptTree {
    pub seed: TokenId,
    pub root: GptTreeNode,
    pub shape: TreeShape,
    pub backend: BackendDescriptor,
}

#[derive(Debug, Clone)]
pub struct FlattenConfig {
    pub depth: usize,
    pub branch: usize,
    /// Where partial progress is written on failure and read on resume.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        Self {
            depth: DEFAULT_DEPTH,
            branch: DEFAULT_BRANCH,
            checkpoint: None,
        }
    }
}

/// Completed expansions of an interrupted flatten run.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    seed: TokenId,
    depth: usize,
    branch: usize,
    backend: BackendDescriptor,
    expansions: Vec<(Vec<TokenId>, Edges)>,
}

type Edges = Vec<(TokenId, f64)>;
type Expansions = BTreeMap<Vec<TokenId>, Edges>;

/// Expands `seed` breadth-first: every node above depth `T` receives one
/// `next_token_dist` call with `top_m = K`. Nodes of one level are probed
/// concurrently (bounded by the client) and assembled deterministically.
pub fn flatten_model(
    client: &ProbeClient,
    seed: TokenId,
    config: &FlattenConfig,
) -> Result<GptTree, GptTreeError> {
    if config.depth == 0 || config.branch == 0 {
        return Err(GptTreeError::BadShape);
    }
    let backend = client.descriptor().clone();
    let mut done: Expansions = match &config.checkpoint {
        Some(p) if p.exists() => load_checkpoint(p, seed, config, &backend)?,
        _ => BTreeMap::new(),
    };

    let mut frontier = vec![vec![seed]];
    for _ in 0..config.depth {
        let todo: Vec<&Vec<TokenId>> = frontier.iter().filter(|p| !done.contains_key(*p)).collect();
        let results: Vec<(Vec<TokenId>, Result<Edges, ProbeError>)> = todo
            .par_iter()
            .map(|path| {
                let res = client
                    .next_token_dist(&ProbeRequest {
                        context: path.to_vec(),
                        top_m: config.branch,
                    })
                    .map(|d| {
                        d.entries
                            .into_iter()
                            .filter(|&(_, p)| p >= PROB_FLOOR)
                            .take(config.branch)
                            .collect()
                    });
                (path.to_vec(), res)
            })
            .collect();
        let mut failure = None;
        for (path, res) in results {
            match res {
                Ok(children) => {
                    done.insert(path, children);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(source) = failure {
            let checkpoint = match &config.checkpoint {
                Some(p) => {
                    save_checkpoint(p, seed, config, &backend, &done)?;
                    Some(p.clone())
                }
                None => None,
            };
            return Err(GptTreeError::Backend { source, checkpoint });
        }
        frontier = frontier
            .iter()
            .flat_map(|p| {
                done[p].iter().map(move |&(t, _)| {
                    let mut next = p.clone();
                    next.push(t);
                    next
                })
            })
            .collect();
    }

    let mut path = vec![seed];
    let root = GptTreeNode {
        token: seed,
        prob: 1.0,
        children: assemble(&mut path, &done),
    };
    if let Some(p) = &config.checkpoint {
        let _ = std::fs::remove_file(p);
    }
    let node_count = root.count();
    Ok(GptTree {
        seed,
        root,
        shape: TreeShape {
            depth: config.depth,
            branch: config.branch,
            node_count,
        },
        backend,
    })
}

fn assemble(path: &mut Vec<TokenId>, done: &Expansions) -> Vec<GptTreeNode> {
    let Some(children) = done.get(path) else {
        return Vec::new();
    };
    children
        .iter()
        .map(|&(token, prob)| {
            path.push(token);
            let grand = assemble(path, done);
            path.pop();
            GptTreeNode {
                token,
                prob,
                children: grand,
            }
        })
        .collect()
}

fn save_checkpoint(
    path: &Path,
    seed: TokenId,
    config: &FlattenConfig,
    backend: &BackendDescriptor,
    done: &Expansions,
) -> Result<(), GptTreeError> {
    let ck = Checkpoint {
        seed,
        depth: config.depth,
        branch: config.branch,
        backend: backend.clone(),
        expansions: done.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
    };
    let body = serde_json::to_vec(&ck)?;
    std::fs::write(path, body).map_err(|e| GptTreeError::CheckpointIo {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_checkpoint(
    path: &Path,
    seed: TokenId,
    config: &FlattenConfig,
    backend: &BackendDescriptor,
) -> Result<Expansions, GptTreeError> {
    let bytes = std::fs::read(path).map_err(|e| GptTreeError::CheckpointIo {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    let stale = |reason: &str| GptTreeError::StaleCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if ck.seed != seed || ck.depth != config.depth || ck.branch != config.branch {
        return Err(stale("seed or shape differs"));
    }
    if ck.backend.model_id != backend.model_id
        || ck.backend.tokenizer_hash != backend.tokenizer_hash
    {
        return Err(stale("backend differs"));
    }
    log::info!(
        "resuming from {} with {} expansions",
        path.display(),
        ck.expansions.len()
    );
    Ok(ck.expansions.into_iter().collect())
}

impl GptTree {
    /// Product of edge probabilities along `path`; `None` once the path
    /// leaves the flattened tree.
    pub fn path_prob(&self, path: &[TokenId]) -> Option<f64> {
        let (&first, rest) = path.split_first()?;
        if first != self.seed {
            return None;
        }
        let mut node = &self.root;
        let mut p = 1.0;
        for t in rest {
            node = node.children.iter().find(|c| c.token == *t)?;
            p *= node.prob;
        }
        Some(p)
    }

    /// Node reached by `path` (starting with the seed).
    pub fn node(&self, path: &[TokenId]) -> Option<&GptTreeNode> {
        let (&first, rest) = path.split_first()?;
        if first != self.seed {
            return None;
        }
        let mut node = &self.root;
        for t in rest {
            node = node.children.iter().find(|c| c.token == *t)?;
        }
        Some(node)
    }

    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::GptTree);
        w.u32(self.seed);
        w.str(&self.backend.endpoint);
        w.str(&self.backend.model_id);
        w.str(&self.backend.tokenizer_hash);
        w.u32(self.shape.depth as u32);
        w.u32(self.shape.branch as u32);
        w.u64(self.shape.node_count as u64);
        w.u64(self.node_count() as u64);
        let mut stack = vec![&self.root];
        while let Some(n) = stack.pop() {
            w.u32(n.token);
            w.f64(n.prob);
            w.u32(n.children.len() as u32);
            stack.extend(n.children.iter().rev());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GptTreeError> {
        let mut r = Reader::open(bytes, Kind::GptTree)?;
        let seed = r.u32()?;
        let backend = BackendDescriptor {
            endpoint: r.str()?,
            model_id: r.str()?,
            tokenizer_hash: r.str()?,
        };
        let shape = TreeShape {
            depth: r.u32()? as usize,
            branch: r.u32()? as usize,
            node_count: r.u64()? as usize,
        };
        let declared = r.u64()?;
        let mut read = 0;
        let root = read_node(&mut r, &mut read, declared)?;
        if read != declared {
            return Err(ContainerError::Corrupt(format!(
                "header declares {declared} nodes, stream holds {read}"
            ))
            .into());
        }
        r.expect_end()?;
        Ok(Self {
            seed,
            root,
            shape,
            backend,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GptTreeError> {
        Ok(container::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, GptTreeError> {
        Self::from_bytes(&container::read_file(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GptTreeJson {
            seed: self.seed,
            shape: self.shape,
            backend: self.backend.clone(),
            root: self.root.clone(),
        })
        .expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GptTreeError> {
        let j: GptTreeJson = serde_json::from_str(text)?;
        Ok(Self {
            seed: j.seed,
            root: j.root,
            shape: j.shape,
            backend: j.backend,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GptTreeJson {
    seed: TokenId,
    shape: TreeShape,
    backend: BackendDescriptor,
    root: GptTreeNode,
}

fn read_node(
    r: &mut Reader<'_>,
    read: &mut u64,
    limit: u64,
) -> Result<GptTreeNode, ContainerError> {
    *read += 1;
    if *read > limit {
        return Err(ContainerError::Corrupt("more nodes than declared".into()));
    }
    let token = r.u32()?;
    let prob = r.f64()?;
    let n = r.u32()?;
    let mut children = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        children.push(read_node(r, read, limit)?);
    }
    Ok(GptTreeNode {
        token,
        prob,
        children,
    })
}
