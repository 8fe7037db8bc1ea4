//! Corpus frequency tries ("data trees"), language-model tries obtained by
//! probing a model ("probed trees"), and the metrics that compare them.

pub mod analysis;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod data_tree;
pub mod gpt_tree;
pub mod metrics;
pub mod mle;
pub mod probe;
pub mod tokenizer;
pub mod viz;

pub use corpus::{Chunk, ChunkConfig, Document};
pub use data_tree::{BuildConfig, DataTree, DataTreeNode, Frequency, OccurrenceMode};
pub use tokenizer::{TokenId, TokenSeq, Tokenizer, TokenizerKind};
