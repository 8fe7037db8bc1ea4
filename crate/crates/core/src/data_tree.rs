//! Conditional-frequency trie over a chunked corpus.
//!
//! Every node stores `N(h)`, the number of times the path from the seed to
//! that node occurs in the chunk stream. Edge probabilities are derived on
//! demand as `N(h, w) / N(h)` so that merged trees stay exact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{self, ContainerError, Kind, Reader, Writer};
use crate::corpus::Chunk;
use crate::tokenizer::TokenId;

pub const DEFAULT_MAX_DEPTH: usize = 10;

#[derive(Debug, Error)]
pub enum DataTreeError {
    #[error("context is empty")]
    EmptyContext,
    #[error("context starts with token {found}, tree seed is {seed}")]
    SeedMismatch { seed: TokenId, found: TokenId },
    #[error("cannot merge trees: {0}")]
    Merge(String),
    #[error("max_depth must be at least 1")]
    ZeroDepth,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid tree JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where a seed occurrence may start a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OccurrenceMode {
    /// Every position holding the seed token.
    #[default]
    AnyOccurrence,
    /// Only position 0 of each chunk.
    ChunkInitial,
}

impl OccurrenceMode {
    fn tag(self) -> u8 {
        match self {
            Self::AnyOccurrence => 0,
            Self::ChunkInitial => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, ContainerError> {
        match tag {
            0 => Ok(Self::AnyOccurrence),
            1 => Ok(Self::ChunkInitial),
            t => Err(ContainerError::Corrupt(format!(
                "unknown occurrence mode {t}"
            ))),
        }
    }
}

impl std::str::FromStr for OccurrenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any_occurrence" => Ok(Self::AnyOccurrence),
            "chunk_initial" => Ok(Self::ChunkInitial),
            other => Err(format!(
                "unknown mode {other:?} (expected any_occurrence or chunk_initial)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Number of tokens recorded after each seed occurrence.
    pub max_depth: usize,
    pub mode: OccurrenceMode,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            mode: OccurrenceMode::AnyOccurrence,
        }
    }
}

/// Order-independent digest of the chunks folded into a tree: a chunk
/// count plus the wrapping sum of per-chunk hashes. Merging adds digests,
/// so any partition of a corpus yields the same value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusDigest {
    pub chunks: u64,
    pub sum: u128,
}

impl CorpusDigest {
    fn add_chunk(&mut self, chunk: &Chunk) {
        let mut h = Sha256::new();
        h.update((chunk.doc_id.len() as u64).to_le_bytes());
        h.update(chunk.doc_id.as_bytes());
        h.update((chunk.offset as u64).to_le_bytes());
        for t in &chunk.tokens {
            h.update(t.to_le_bytes());
        }
        let d = h.finalize();
        self.chunks += 1;
        self.sum = self
            .sum
            .wrapping_add(u128::from_le_bytes(d[..16].try_into().unwrap()));
    }

    fn combine(self, other: Self) -> Self {
        Self {
            chunks: self.chunks + other.chunks,
            sum: self.sum.wrapping_add(other.sum),
        }
    }
}

impl fmt::Display for CorpusDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:032x}", self.chunks, self.sum)
    }
}

impl std::str::FromStr for CorpusDigest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, sum) = s.split_once(':').ok_or("corpus digest needs `count:hex`")?;
        Ok(Self {
            chunks: n.parse().map_err(|e| format!("{e}"))?,
            sum: u128::from_str_radix(sum, 16).map_err(|e| format!("{e}"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMeta {
    pub tokenizer_hash: String,
    pub corpus: CorpusDigest,
    pub config: BuildConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTreeNode {
    pub token: TokenId,
    pub count: u64,
    pub children: BTreeMap<TokenId, DataTreeNode>,
}

impl DataTreeNode {
    fn new(token: TokenId) -> Self {
        Self {
            token,
            count: 0,
            children: BTreeMap::new(),
        }
    }

    fn add(&mut self, other: &DataTreeNode) {
        self.count += other.count;
        for (tok, child) in &other.children {
            self.children
                .entry(*tok)
                .or_insert_with(|| DataTreeNode::new(*tok))
                .add(child);
        }
    }

    fn node_count(&self) -> usize {
        1 + self.children.values().map(Self::node_count).sum::<usize>()
    }

    /// Children ordered by count descending, ties by ascending token id.
    pub fn ranked_children(&self) -> Vec<&DataTreeNode> {
        let mut kids: Vec<&DataTreeNode> = self.children.values().collect();
        kids.sort_by(|a, b| b.count.cmp(&a.count).then(a.token.cmp(&b.token)));
        kids
    }
}

/// An exact ratio `count / total` of two corpus counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frequency {
    pub count: u64,
    pub total: u64,
}

impl Frequency {
    pub fn value(self) -> f64 {
        self.count as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTree {
    pub seed: TokenId,
    pub root: DataTreeNode,
    pub meta: TreeMeta,
}

impl DataTree {
    pub fn empty(seed: TokenId, tokenizer_hash: impl Into<String>, config: BuildConfig) -> Self {
        Self {
            seed,
            root: DataTreeNode::new(seed),
            meta: TreeMeta {
                tokenizer_hash: tokenizer_hash.into(),
                corpus: CorpusDigest::default(),
                config,
            },
        }
    }

    /// True when the seed never occurred.
    pub fn is_empty(&self) -> bool {
        self.root.count == 0
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    /// Folds one chunk's seed occurrences into the tree.
    pub fn add_chunk(&mut self, chunk: &Chunk) {
        self.meta.corpus.add_chunk(chunk);
        let depth = self.meta.config.max_depth;
        let tokens = &chunk.tokens;
        let starts: Box<dyn Iterator<Item = usize>> = match self.meta.config.mode {
            OccurrenceMode::AnyOccurrence => Box::new(0..tokens.len()),
            OccurrenceMode::ChunkInitial => Box::new(0..tokens.len().min(1)),
        };
        for start in starts {
            if tokens[start] != self.seed {
                continue;
            }
            let mut node = &mut self.root;
            node.count += 1;
            let end = tokens.len().min(start + 1 + depth);
            for &tok in &tokens[start + 1..end] {
                node = node
                    .children
                    .entry(tok)
                    .or_insert_with(|| DataTreeNode::new(tok));
                node.count += 1;
            }
        }
    }

    /// Node reached by `context`, which must start with the seed.
    pub fn node(&self, context: &[TokenId]) -> Result<Option<&DataTreeNode>, DataTreeError> {
        let (&first, rest) = context.split_first().ok_or(DataTreeError::EmptyContext)?;
        if first != self.seed {
            return Err(DataTreeError::SeedMismatch {
                seed: self.seed,
                found: first,
            });
        }
        let mut node = &self.root;
        for tok in rest {
            match node.children.get(tok) {
                Some(n) => node = n,
                None => return Ok(None),
            }
        }
        Ok(Some(node))
    }

    /// `N(context + next) / N(context)`, or `None` when the context itself
    /// was never observed.
    pub fn conditional_prob(
        &self,
        context: &[TokenId],
        next: TokenId,
    ) -> Result<Option<Frequency>, DataTreeError> {
        Ok(self
            .node(context)?
            .filter(|n| n.count > 0)
            .map(|n| Frequency {
                count: n.children.get(&next).map_or(0, |c| c.count),
                total: n.count,
            }))
    }

    /// Up to `k` continuations of `context` by descending probability, ties
    /// by ascending token id. `None` when the context is unobserved.
    pub fn top_k_children(
        &self,
        context: &[TokenId],
        k: usize,
    ) -> Result<Option<Vec<(TokenId, Frequency)>>, DataTreeError> {
        let Some(node) = self.node(context)?.filter(|n| n.count > 0) else {
            return Ok(None);
        };
        Ok(Some(
            node.ranked_children()
                .into_iter()
                .take(k)
                .map(|c| {
                    (
                        c.token,
                        Frequency {
                            count: c.count,
                            total: node.count,
                        },
                    )
                })
                .collect(),
        ))
    }

    /// Elementwise sum of trees built with the same seed, tokenizer and
    /// build configuration.
    pub fn merge(trees: &[DataTree]) -> Result<DataTree, DataTreeError> {
        let (first, rest) = trees
            .split_first()
            .ok_or_else(|| DataTreeError::Merge("no trees given".into()))?;
        let mut out = first.clone();
        for t in rest {
            out.merge_in(t)?;
        }
        Ok(out)
    }

    pub fn merge_in(&mut self, other: &DataTree) -> Result<(), DataTreeError> {
        if other.seed != self.seed {
            return Err(DataTreeError::Merge(format!(
                "seed {} vs {}",
                self.seed, other.seed
            )));
        }
        if other.meta.tokenizer_hash != self.meta.tokenizer_hash {
            return Err(DataTreeError::Merge("tokenizer hashes differ".into()));
        }
        if other.meta.config != self.meta.config {
            return Err(DataTreeError::Merge("build configurations differ".into()));
        }
        self.root.add(&other.root);
        self.meta.corpus = self.meta.corpus.combine(other.meta.corpus);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::DataTree);
        w.u32(self.seed);
        w.str(&self.meta.tokenizer_hash);
        w.u64(self.meta.corpus.chunks);
        w.u128(self.meta.corpus.sum);
        w.u32(self.meta.config.max_depth as u32);
        w.u8(self.meta.config.mode.tag());
        w.u64(self.node_count() as u64);
        let mut stack = vec![&self.root];
        while let Some(n) = stack.pop() {
            w.u32(n.token);
            w.u64(n.count);
            w.u32(n.children.len() as u32);
            stack.extend(n.children.values().rev());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataTreeError> {
        let mut r = Reader::open(bytes, Kind::DataTree)?;
        let seed = r.u32()?;
        let tokenizer_hash = r.str()?;
        let corpus = CorpusDigest {
            chunks: r.u64()?,
            sum: r.u128()?,
        };
        let config = BuildConfig {
            max_depth: r.u32()? as usize,
            mode: OccurrenceMode::from_tag(r.u8()?)?,
        };
        let declared = r.u64()?;
        let mut read = 0u64;
        let root = read_node(&mut r, &mut read, declared)?;
        if read != declared {
            return Err(ContainerError::Corrupt(format!(
                "header declares {declared} nodes, stream holds {read}"
            ))
            .into());
        }
        r.expect_end()?;
        if root.token != seed {
            return Err(ContainerError::Corrupt("root token differs from seed".into()).into());
        }
        Ok(Self {
            seed,
            root,
            meta: TreeMeta {
                tokenizer_hash,
                corpus,
                config,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataTreeError> {
        Ok(container::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataTreeError> {
        Self::from_bytes(&container::read_file(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DataTreeJson::from(self)).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataTreeError> {
        let j: DataTreeJson = serde_json::from_str(text)?;
        let corpus = j
            .meta
            .corpus_hash
            .parse()
            .map_err(|e: String| DataTreeError::Merge(format!("bad corpus digest: {e}")))?;
        Ok(Self {
            seed: j.seed,
            root: j.root.into_node(),
            meta: TreeMeta {
                tokenizer_hash: j.meta.tokenizer_hash,
                corpus,
                config: j.meta.config,
            },
        })
    }
}

fn read_node(
    r: &mut Reader<'_>,
    read: &mut u64,
    limit: u64,
) -> Result<DataTreeNode, ContainerError> {
    *read += 1;
    if *read > limit {
        return Err(ContainerError::Corrupt("more nodes than declared".into()));
    }
    let token = r.u32()?;
    let count = r.u64()?;
    let n = r.u32()?;
    let mut children = BTreeMap::new();
    for _ in 0..n {
        let child = read_node(r, read, limit)?;
        if children.insert(child.token, child).is_some() {
            return Err(ContainerError::Corrupt("duplicate child token".into()));
        }
    }
    Ok(DataTreeNode {
        token,
        count,
        children,
    })
}

/// Builds a tree from a chunk stream in one pass.
pub fn build_data_tree<'a, I>(
    chunks: I,
    seed: TokenId,
    tokenizer_hash: &str,
    config: BuildConfig,
) -> Result<DataTree, DataTreeError>
where
    I: IntoIterator<Item = &'a Chunk>,
{
    if config.max_depth == 0 {
        return Err(DataTreeError::ZeroDepth);
    }
    let mut tree = DataTree::empty(seed, tokenizer_hash, config);
    for c in chunks {
        tree.add_chunk(c);
    }
    Ok(tree)
}

/// Splits `chunks` into `workers` contiguous partitions, builds them on a
/// dedicated pool and merges the partial trees.
pub fn build_data_tree_parallel(
    chunks: &[Chunk],
    seed: TokenId,
    tokenizer_hash: &str,
    config: BuildConfig,
    workers: usize,
) -> Result<DataTree, DataTreeError> {
    let workers = workers.max(1);
    if workers == 1 {
        return build_data_tree(chunks, seed, tokenizer_hash, config);
    }
    let per = chunks.len().div_ceil(workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let parts = pool.install(|| {
        chunks
            .par_chunks(per)
            .map(|part| build_data_tree(part, seed, tokenizer_hash, config))
            .collect::<Result<Vec<_>, _>>()
    })?;
    if parts.is_empty() {
        return build_data_tree([], seed, tokenizer_hash, config);
    }
    DataTree::merge(&parts)
}

#[derive(Serialize, Deserialize)]
struct DataTreeJson {
    seed: TokenId,
    meta: MetaJson,
    root: NodeJson,
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    tokenizer_hash: String,
    corpus_hash: String,
    config: BuildConfig,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    token: TokenId,
    count: u64,
    children: Vec<NodeJson>,
}

impl NodeJson {
    fn into_node(self) -> DataTreeNode {
        DataTreeNode {
            token: self.token,
            count: self.count,
            children: self
                .children
                .into_iter()
                .map(|c| (c.token, c.into_node()))
                .collect(),
        }
    }
}

impl From<&DataTreeNode> for NodeJson {
    fn from(n: &DataTreeNode) -> Self {
        Self {
            token: n.token,
            count: n.count,
            children: n.children.values().map(NodeJson::from).collect(),
        }
    }
}

impl From<&DataTree> for DataTreeJson {
    fn from(t: &DataTree) -> Self {
        Self {
            seed: t.seed,
            meta: MetaJson {
                tokenizer_hash: t.meta.tokenizer_hash.clone(),
                corpus_hash: t.meta.corpus.to_string(),
                config: t.meta.config,
            },
            root: NodeJson::from(&t.root),
        }
    }
}
