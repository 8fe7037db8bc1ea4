//! Run configuration: a TOML file whose values flags override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CliError, GlobalArgs};
use crate::corpus::{DEFAULT_CHUNK_LEN, DEFAULT_MIN_CHARS};
use crate::data_tree::{OccurrenceMode, DEFAULT_MAX_DEPTH};
use crate::gpt_tree::{DEFAULT_BRANCH, DEFAULT_DEPTH};

/// Seed words, one per initial letter.
pub const DEFAULT_SEED_WORDS: [&str; 23] = [
    "As", "Because", "Could", "Do", "Even", "For", "Given", "However", "If", "Just", "Keep", "Let",
    "Many", "Now", "Once", "Perhaps", "Quite", "Rather", "Since", "The", "Under", "Very", "Where",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKindName {
    #[default]
    Whitespace,
    ByteBpe,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    #[serde(default)]
    pub kind: TokenizerKindName,
    /// JSON object mapping token strings to ids. Without it a whitespace
    /// vocabulary is derived from the corpus and a byte-level tokenizer
    /// uses the bare byte table.
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    corpus: Vec<PathBuf>,
    tokenizer: Option<TokenizerSpec>,
    seed_tokens: Option<Vec<String>>,
    chunk_len: Option<usize>,
    min_chars: Option<usize>,
    pack: Option<bool>,
    max_depth: Option<usize>,
    mode: Option<OccurrenceMode>,
    depth: Option<usize>,
    branch: Option<usize>,
    backend: Option<String>,
    model: Option<String>,
    out: Option<PathBuf>,
    rng_seed: Option<u64>,
    workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub corpus: Vec<PathBuf>,
    pub tokenizer: TokenizerSpec,
    pub seed_tokens: Vec<String>,
    pub chunk_len: usize,
    pub min_chars: usize,
    pub pack: bool,
    pub max_depth: usize,
    pub mode: OccurrenceMode,
    #[serde(rename = "T")]
    pub depth: usize,
    #[serde(rename = "K")]
    pub branch: usize,
    pub backend: Option<String>,
    pub model: Option<String>,
    #[serde(skip)]
    pub out: PathBuf,
    pub rng_seed: u64,
    #[serde(skip)]
    pub workers: usize,
}

fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                let file: FileConfig = toml::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("invalid config {}: {e}", path.display()))
                })?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let mut tokenizer = file.tokenizer.unwrap_or_default();
        tokenizer.vocab = tokenizer.vocab.map(|p| rebase(&base, p));
        tokenizer.merges = tokenizer.merges.map(|p| rebase(&base, p));
        if let Some(k) = args.tokenizer_kind {
            tokenizer.kind = k;
        }
        if let Some(v) = &args.vocab {
            tokenizer.vocab = Some(v.clone());
        }
        if let Some(m) = &args.merges {
            tokenizer.merges = Some(m.clone());
        }
        let corpus = if args.corpus.is_empty() {
            file.corpus.into_iter().map(|p| rebase(&base, p)).collect()
        } else {
            args.corpus.clone()
        };
        let seed_tokens: Vec<String> = match (&args.seed_tokens, file.seed_tokens) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => s,
            (None, None) => DEFAULT_SEED_WORDS.iter().map(|s| s.to_string()).collect(),
        };
        let seed_tokens: Vec<String> = seed_tokens
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let cfg = Self {
            corpus,
            tokenizer,
            seed_tokens,
            chunk_len: args
                .chunk_len
                .or(file.chunk_len)
                .unwrap_or(DEFAULT_CHUNK_LEN),
            min_chars: args
                .min_chars
                .or(file.min_chars)
                .unwrap_or(DEFAULT_MIN_CHARS),
            pack: args.pack || file.pack.unwrap_or(false),
            max_depth: args
                .max_depth
                .or(file.max_depth)
                .unwrap_or(DEFAULT_MAX_DEPTH),
            mode: args.mode.or(file.mode).unwrap_or_default(),
            depth: args.depth.or(file.depth).unwrap_or(DEFAULT_DEPTH),
            branch: args.branch.or(file.branch).unwrap_or(DEFAULT_BRANCH),
            backend: args.backend.clone().or(file.backend),
            model: args.model.clone().or(file.model),
            out: args
                .out
                .clone()
                .or_else(|| file.out.map(|p| rebase(&base, p)))
                .unwrap_or_else(|| PathBuf::from("lantree-out")),
            rng_seed: args.rng_seed.or(file.rng_seed).unwrap_or(0),
            workers: args
                .workers
                .or(file.workers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [
            ("depth (T)", self.depth),
            ("branch (K)", self.branch),
            ("chunk_len", self.chunk_len),
            ("max_depth", self.max_depth),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(CliError::Usage(format!("{name} must be at least 1")));
            }
        }
        let paths = self
            .corpus
            .iter()
            .chain(&self.tokenizer.vocab)
            .chain(&self.tokenizer.merges);
        for p in paths {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
