//! The `lantree` command line.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

pub use config::{RunConfig, TokenizerKindName, TokenizerSpec, DEFAULT_SEED_WORDS};
pub use manifest::{FileHash, Manifest};

use crate::analysis::{self, ArithOp, QaPair, Term};
use crate::corpus::{chunk_corpus, read_corpus, Chunk, ChunkConfig};
use crate::data_tree::{build_data_tree_parallel, BuildConfig, DataTree};
use crate::gpt_tree::{flatten_model, FlattenConfig, GptTree};
use crate::metrics::{compare, ComparisonReport, MetricError};
use crate::mle::{self, ContextCounts, MleProblem};
use crate::probe::{
    ClientOptions, FrequencyOracle, HttpTransport, ProbeCache, ProbeClient, Transport,
};
use crate::tokenizer::{TokenId, Tokenizer, TokenizerKind};
use crate::viz::{self, SankeyOptions};
use manifest::{hash_inputs, sha256_hex, Outputs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Run(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Run(m) => write!(f, "{m}"),
        }
    }
}

macro_rules! run_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Run(e.to_string())
            }
        }
    )*};
}

run_error_from!(
    crate::corpus::CorpusError,
    crate::data_tree::DataTreeError,
    crate::gpt_tree::GptTreeError,
    crate::probe::ProbeError,
    crate::probe::OracleTokenizerMismatch,
    crate::tokenizer::TokenizerError,
    crate::analysis::AnalysisError,
    crate::viz::VizError,
    MetricError
);

#[derive(Debug, Parser)]
#[command(
    name = "lantree",
    version,
    about = "Corpus and language-model token trees"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Comma-separated seed words.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed_tokens: Option<Vec<String>>,
    /// Probed tree depth T.
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Probed tree branching K.
    #[arg(long, global = true)]
    pub branch: Option<usize>,
    /// `http(s)://host:port`, `oracle:DIR` (data trees in DIR) or, for
    /// bias-eval, `qa-oracle`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub mode: Option<crate::data_tree::OccurrenceMode>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub rng_seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Corpus file (JSONL) or directory of .txt files; repeatable.
    #[arg(long, global = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub tokenizer_kind: Option<TokenizerKindName>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub merges: Option<PathBuf>,
    /// Data tree depth (tokens recorded after the seed).
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
    #[arg(long, global = true)]
    pub chunk_len: Option<usize>,
    #[arg(long, global = true)]
    pub min_chars: Option<usize>,
    #[arg(long, global = true)]
    pub pack: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count seed continuations in the corpus, one tree per seed.
    BuildDataTree,
    /// Probe a backend breadth-first, one tree per seed.
    FlattenGpt(FlattenArgs),
    /// Compare probed trees with data trees.
    Compare(CompareArgs),
    /// Write Sankey JSON and HTML for tree files.
    ExportSankey(SankeyArgs),
    /// Write generated arithmetic QA pairs and their corpus text.
    GenQa(QaArgs),
    /// Exact-match accuracy on arithmetic QA, with a perturbed terminator.
    BiasEval(BiasArgs),
    /// Windowed co-occurrence counts of terms in the corpus.
    Cooccur(CooccurArgs),
    /// Fit maximum-likelihood distributions and check them against counts.
    VerifyMle(MleArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlattenArgs {
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// Defaults to OUT/data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to OUT/gpt.
    #[arg(long)]
    pub gpt: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SankeyArgs {
    /// Data or probed tree file; repeatable.
    #[arg(long, required = true)]
    pub tree: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub max_children: usize,
    #[arg(long, default_value_t = viz::DEFAULT_FLOOR)]
    pub floor: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QaArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value = "+-*/")]
    pub ops: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BiasArgs {
    /// QA pairs as JSONL; generated from --n/--ops/--rng-seed when absent.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[command(flatten)]
    pub gen: QaArgs,
    #[arg(long, default_value = analysis::DEFAULT_REPLACEMENT)]
    pub replacement: String,
    #[arg(long)]
    pub no_perturb: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CooccurArgs {
    /// Comma-separated terms.
    #[arg(long, required = true, value_delimiter = ',')]
    pub terms: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MleArgs {
    /// Data tree file or directory of them.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of random count tables when no data is given.
    #[arg(long, default_value_t = 50)]
    pub random: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = mle::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = mle::DEFAULT_ITERS)]
    pub iters: usize,
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Manifest, CliError> {
    let cfg = RunConfig::resolve(&cli.global)?;
    let (name, args) = match &cli.command {
        Command::BuildDataTree => ("build-data-tree", json!({})),
        Command::FlattenGpt(a) => ("flatten-gpt", json!(a)),
        Command::Compare(a) => ("compare", json!(a)),
        Command::ExportSankey(a) => ("export-sankey", json!(a)),
        Command::GenQa(a) => ("gen-qa", json!(a)),
        Command::BiasEval(a) => ("bias-eval", json!(a)),
        Command::Cooccur(a) => ("cooccur", json!(a)),
        Command::VerifyMle(a) => ("verify-mle", json!(a)),
    };
    let digest = sha256_hex(
        serde_json::to_string(&json!({ "command": name, "config": cfg, "args": args }))
            .expect("config serializes")
            .as_bytes(),
    );
    let mut out = Outputs::new(&cfg.out);
    let (inputs, notes) = match &cli.command {
        Command::BuildDataTree => build_data_trees(&cfg, &mut out)?,
        Command::FlattenGpt(a) => flatten_gpt(&cfg, a, &mut out)?,
        Command::Compare(a) => compare_trees(&cfg, a, &mut out)?,
        Command::ExportSankey(a) => export_sankey(&cfg, a, &mut out)?,
        Command::GenQa(a) => gen_qa(&cfg, a, &mut out)?,
        Command::BiasEval(a) => bias_eval(&cfg, a, &mut out)?,
        Command::Cooccur(a) => cooccur(&cfg, a, &mut out)?,
        Command::VerifyMle(a) => verify_mle(&cfg, a, &mut out)?,
    };
    let failed = notes.get("passed") == Some(&json!(false));
    let manifest = out.finish(name, digest, inputs, notes)?;
    log::info!(
        "{name}: wrote {} outputs under {}",
        manifest.outputs.len(),
        cfg.out.display()
    );
    if failed {
        return Err(CliError::Run(format!("{name} check failed")));
    }
    Ok(manifest)
}

type Step = Result<(Vec<FileHash>, serde_json::Value), CliError>;

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

fn tokenizer_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    cfg.tokenizer
        .vocab
        .iter()
        .chain(&cfg.tokenizer.merges)
        .cloned()
        .collect()
}

fn saved_vocab(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("tokenizer").join("vocab.json")
}

/// The configured tokenizer. A whitespace tokenizer without a vocab file
/// is derived from the corpus, or read back from a previous build in the
/// output directory.
fn load_tokenizer(cfg: &RunConfig) -> Result<Tokenizer, CliError> {
    let spec = &cfg.tokenizer;
    let kind = match spec.kind {
        TokenizerKindName::Whitespace => TokenizerKind::Whitespace,
        TokenizerKindName::ByteBpe => TokenizerKind::ByteBpe,
    };
    if let Some(v) = &spec.vocab {
        return Ok(Tokenizer::load(kind, v, spec.merges.as_deref())?);
    }
    match kind {
        TokenizerKind::ByteBpe => Ok(Tokenizer::byte_level(&[])?),
        TokenizerKind::Whitespace if !cfg.corpus.is_empty() => {
            let docs = read_corpus(&cfg.corpus)?;
            Ok(Tokenizer::whitespace_from_texts(
                docs.iter().map(|d| d.text.as_str()),
            ))
        }
        TokenizerKind::Whitespace if saved_vocab(cfg).exists() => {
            Ok(Tokenizer::load(kind, &saved_vocab(cfg), None)?)
        }
        TokenizerKind::Whitespace => Err(CliError::Usage(
            "no tokenizer: give --vocab, a corpus, or an output directory from build-data-tree"
                .into(),
        )),
    }
}

type Seeds = Vec<(String, TokenId)>;

/// Seed words that map to exactly one known token, plus the rejects.
fn seed_ids(cfg: &RunConfig, tok: &Tokenizer) -> Result<(Seeds, Vec<String>), CliError> {
    if cfg.seed_tokens.is_empty() {
        return Err(CliError::Usage("the seed token list is empty".into()));
    }
    let mut seeds = Vec::new();
    let mut skipped = Vec::new();
    for w in &cfg.seed_tokens {
        match tok.tokenize(w)?.as_slice() {
            [id] if tok.unk_id() != Some(*id) => {
                if !seeds.iter().any(|(_, s)| s == id) {
                    seeds.push((w.clone(), *id));
                }
            }
            other => {
                log::warn!("seed {w:?} is not a single known token ({other:?}); skipped");
                skipped.push(w.clone());
            }
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Run("no seed word is a single known token".into()));
    }
    Ok((seeds, skipped))
}

fn seed_file(seed: TokenId) -> String {
    format!("seed-{seed}.tree")
}

fn load_chunks(cfg: &RunConfig, tok: &Tokenizer) -> Result<Vec<Chunk>, CliError> {
    if cfg.corpus.is_empty() {
        return Err(CliError::Usage("no corpus given".into()));
    }
    let docs = read_corpus(&cfg.corpus)?;
    Ok(chunk_corpus(
        &docs,
        tok,
        ChunkConfig {
            chunk_len: cfg.chunk_len,
            min_chars: cfg.min_chars,
            pack: cfg.pack,
        },
    )?)
}

fn build_data_trees(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let tok = load_tokenizer(cfg)?;
    let (seeds, skipped) = seed_ids(cfg, &tok)?;
    let chunks = load_chunks(cfg, &tok)?;
    log::info!("{} chunks, {} seeds", chunks.len(), seeds.len());
    let build = BuildConfig {
        max_depth: cfg.max_depth,
        mode: cfg.mode,
    };
    let mut empty = Vec::new();
    let mut trees = Vec::new();
    for (word, seed) in &seeds {
        let tree = build_data_tree_parallel(&chunks, *seed, tok.hash(), build, cfg.workers)?;
        if tree.is_empty() {
            log::warn!("seed {word:?} does not occur in the corpus");
            empty.push(word.clone());
        }
        log::info!(
            "seed {word:?}: count {}, {} nodes",
            tree.root.count,
            tree.node_count()
        );
        out.write(Path::new("data").join(seed_file(*seed)), &tree.to_bytes())?;
        trees.push(json!({ "word": word, "token": seed, "count": tree.root.count, "nodes": tree.node_count() }));
    }
    let vocab = saved_vocab(cfg);
    let merges = cfg.out.join("tokenizer").join("merges.txt");
    let with_merges = tok.kind() == TokenizerKind::ByteBpe;
    std::fs::create_dir_all(vocab.parent().unwrap()).map_err(|e| CliError::io(&vocab, e))?;
    tok.save(&vocab, with_merges.then_some(merges.as_path()))?;
    for p in std::iter::once(&vocab).chain(with_merges.then_some(&merges)) {
        let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
        out.record(p.strip_prefix(out.root()).unwrap_or(p), &bytes);
    }
    let mut inputs = hash_inputs(&cfg.corpus)?;
    inputs.extend(hash_inputs(&tokenizer_paths(cfg))?);
    Ok((
        inputs,
        json!({
            "tokenizer_hash": tok.hash(),
            "chunks": chunks.len(),
            "seeds": trees,
            "skipped_seeds": skipped,
            "empty_seeds": empty,
        }),
    ))
}

/// A client for the configured backend, and the tokenizer it must use
/// when one is configured.
fn connect(
    cfg: &RunConfig,
    max_in_flight: usize,
) -> Result<(ProbeClient, Option<Tokenizer>, Vec<FileHash>), CliError> {
    let backend = cfg
        .backend
        .as_deref()
        .ok_or_else(|| CliError::Usage("--backend is required".into()))?;
    let opts = ClientOptions {
        max_in_flight,
        cache: ProbeCache::from_env(),
        ..ClientOptions::default()
    };
    let (transport, model, tok, inputs): (
        Arc<dyn Transport>,
        String,
        Option<Tokenizer>,
        Vec<FileHash>,
    ) = if let Some(dir) = backend.strip_prefix("oracle:") {
        let tok = load_tokenizer(cfg)?;
        let files = tree_files(Path::new(dir))?;
        let trees = files
            .iter()
            .map(|f| DataTree::load(f))
            .collect::<Result<Vec<_>, _>>()?;
        let model = cfg.model.clone().unwrap_or_else(|| "oracle".into());
        let oracle = FrequencyOracle::new(model.clone(), tok.clone(), trees)?;
        (Arc::new(oracle), model, Some(tok), hash_inputs(&files)?)
    } else if backend.starts_with("http://") || backend.starts_with("https://") {
        let model = cfg
            .model
            .clone()
            .ok_or_else(|| CliError::Usage("--model is required for an HTTP backend".into()))?;
        let configured =
            cfg.tokenizer.vocab.is_some() || !cfg.corpus.is_empty() || saved_vocab(cfg).exists();
        let tok = if configured {
            Some(load_tokenizer(cfg)?)
        } else {
            None
        };
        (
            Arc::new(HttpTransport::new(backend)),
            model,
            tok,
            Vec::new(),
        )
    } else {
        return Err(CliError::Usage(format!("unsupported backend {backend:?}")));
    };
    let client = ProbeClient::connect(transport, &model, opts)?;
    if let Some(t) = &tok {
        client.descriptor().ensure_tokenizer(t.hash())?;
    }
    Ok((client, tok, inputs))
}

fn tree_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tree"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Run(format!(
            "no .tree files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn flatten_gpt(cfg: &RunConfig, args: &FlattenArgs, out: &mut Outputs) -> Step {
    let (client, tok, mut inputs) = connect(cfg, args.max_in_flight)?;
    let seeds: Vec<(String, TokenId)> = match &tok {
        Some(t) => seed_ids(cfg, t)?.0,
        None => {
            if cfg.seed_tokens.is_empty() {
                return Err(CliError::Usage("the seed token list is empty".into()));
            }
            let mut seeds = Vec::new();
            for w in &cfg.seed_tokens {
                match client.tokenize(w)?.as_slice() {
                    [id] => seeds.push((w.clone(), *id)),
                    _ => log::warn!("seed {w:?} is not a single backend token; skipped"),
                }
            }
            seeds
        }
    };
    let mut rows = Vec::new();
    for (word, seed) in &seeds {
        let rel = Path::new("gpt").join(seed_file(*seed));
        let fc = FlattenConfig {
            depth: cfg.depth,
            branch: cfg.branch,
            checkpoint: Some(
                cfg.out
                    .join("gpt")
                    .join(format!("seed-{seed}.checkpoint.json")),
            ),
        };
        if let Some(dir) = fc.checkpoint.as_ref().and_then(|p| p.parent()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let before = client.probe_calls();
        let tree = flatten_model(&client, *seed, &fc)?;
        log::info!(
            "seed {word:?}: {} nodes, {} probes",
            tree.shape.node_count,
            client.probe_calls() - before
        );
        out.write(&rel, &tree.to_bytes())?;
        rows.push(json!({ "word": word, "token": seed, "nodes": tree.shape.node_count }));
    }
    inputs.extend(hash_inputs(&tokenizer_paths(cfg))?);
    Ok((
        inputs,
        json!({
            "backend": client.descriptor(),
            "T": cfg.depth,
            "K": cfg.branch,
            "seeds": rows,
        }),
    ))
}

fn compare_trees(cfg: &RunConfig, args: &CompareArgs, out: &mut Outputs) -> Step {
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.out.join("data"));
    let gpt_dir = args.gpt.clone().unwrap_or_else(|| cfg.out.join("gpt"));
    let data_files = tree_files(&data_dir)?;
    let gpt_files = tree_files(&gpt_dir)?;
    let mut data: BTreeMap<TokenId, DataTree> = BTreeMap::new();
    for f in &data_files {
        let t = DataTree::load(f)?;
        data.insert(t.seed, t);
    }
    let mut rows = Vec::new();
    let mut no_overlap = Vec::new();
    for f in &gpt_files {
        let g = GptTree::load(f)?;
        let d = data.get(&g.seed).ok_or_else(|| {
            CliError::Run(format!(
                "no data tree for seed {} ({})",
                g.seed,
                f.display()
            ))
        })?;
        match compare(&g, d) {
            Ok(r) => {
                log::info!(
                    "seed {}: mse {:.6e}, recall@5 {:.4}",
                    g.seed,
                    r.mse,
                    r.recall_at_5
                );
                out.write(
                    Path::new("compare").join(format!("seed-{}.json", g.seed)),
                    &pretty(&r),
                )?;
                rows.push(r);
            }
            Err(MetricError::NoOverlap) => {
                log::warn!("seed {}: no overlap with the data tree", g.seed);
                no_overlap.push(g.seed);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let report = ComparisonReport::new(rows, no_overlap);
    out.write("compare/report.json", &pretty(&report))?;
    if let Some(a) = &report.average {
        println!(
            "average mse {:e} recall@5 {} over {} seeds",
            a.mse,
            a.recall_at_5,
            report.rows.len()
        );
    }
    let mut files = data_files;
    files.extend(gpt_files);
    Ok((
        hash_inputs(&files)?,
        json!({
            "seeds": report.rows.len(),
            "no_overlap": report.no_overlap,
            "average": report.average,
        }),
    ))
}

fn export_sankey(cfg: &RunConfig, args: &SankeyArgs, out: &mut Outputs) -> Step {
    let tok = load_tokenizer(cfg)?;
    let opts = SankeyOptions {
        max_depth: cfg.depth,
        max_children: args.max_children,
        floor: args.floor,
    };
    for f in &args.tree {
        let bytes = std::fs::read(f).map_err(|e| CliError::io(f, e))?;
        let (stem, doc) = match DataTree::from_bytes(&bytes) {
            Ok(t) => (
                format!("data-seed-{}", t.seed),
                viz::tree_to_sankey(&t, &tok, &opts)?,
            ),
            Err(_) => {
                let t = GptTree::from_bytes(&bytes)?;
                (
                    format!("gpt-seed-{}", t.seed),
                    viz::tree_to_sankey(&t, &tok, &opts)?,
                )
            }
        };
        out.write(
            Path::new("sankey").join(format!("{stem}.json")),
            &pretty(&doc),
        )?;
        out.write(
            Path::new("sankey").join(format!("{stem}.html")),
            viz::render_html(&doc).as_bytes(),
        )?;
    }
    let mut files = args.tree.clone();
    files.extend(tokenizer_paths(cfg));
    Ok((hash_inputs(&files)?, json!({ "trees": args.tree.len() })))
}

fn generate(cfg: &RunConfig, args: &QaArgs) -> Result<Vec<QaPair>, CliError> {
    let ops = ArithOp::parse_set(&args.ops)?;
    Ok(analysis::gen_arithmetic_qa(args.n, cfg.rng_seed, &ops)?)
}

fn gen_qa(cfg: &RunConfig, args: &QaArgs, out: &mut Outputs) -> Step {
    let pairs = generate(cfg, args)?;
    out.write("qa/qa.jsonl", analysis::write_qa_jsonl(&pairs).as_bytes())?;
    let corpus: String = pairs.iter().map(QaPair::corpus_text).collect();
    out.write("qa/corpus.txt", corpus.as_bytes())?;
    Ok((Vec::new(), json!({ "pairs": pairs.len() })))
}

fn bias_eval(cfg: &RunConfig, args: &BiasArgs, out: &mut Outputs) -> Step {
    let (pairs, mut inputs) = match &args.qa {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            (
                analysis::read_qa_jsonl(&text)?,
                hash_inputs(std::slice::from_ref(p))?,
            )
        }
        None => (generate(cfg, &args.gen)?, Vec::new()),
    };
    let client = if cfg.backend.as_deref() == Some("qa-oracle") {
        let model = cfg.model.clone().unwrap_or_else(|| "qa-oracle".into());
        let oracle = analysis::qa_oracle(&model, &pairs)?;
        ProbeClient::connect(
            Arc::new(oracle),
            &model,
            ClientOptions {
                cache: ProbeCache::from_env(),
                ..ClientOptions::default()
            },
        )?
    } else {
        let (client, _, more) = connect(cfg, 8)?;
        inputs.extend(more);
        client
    };
    let perturb = (!args.no_perturb).then_some(args.replacement.as_str());
    let report = analysis::bias_eval(&client, &pairs, perturb)?;
    match report.acc_perturbed {
        Some(p) => println!(
            "accuracy original {} perturbed {} (n = {})",
            report.acc_original, p, report.n
        ),
        None => println!(
            "accuracy original {} (n = {})",
            report.acc_original, report.n
        ),
    }
    out.write("bias/report.json", &pretty(&report))?;
    out.write("bias/qa.jsonl", analysis::write_qa_jsonl(&pairs).as_bytes())?;
    Ok((
        inputs,
        json!({
            "backend": client.descriptor(),
            "n": report.n,
            "acc_original": report.acc_original,
            "acc_perturbed": report.acc_perturbed,
            "failures": report.failures,
        }),
    ))
}

fn cooccur(cfg: &RunConfig, args: &CooccurArgs, out: &mut Outputs) -> Step {
    let tok = load_tokenizer(cfg)?;
    let terms = args
        .terms
        .iter()
        .map(|t| Term::parse(&tok, t.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let chunks = load_chunks(cfg, &tok)?;
    let table = analysis::cooccur(&chunks, &terms, args.window)?;
    out.write("cooccur/table.json", &pretty(&table))?;
    let mut inputs = hash_inputs(&cfg.corpus)?;
    inputs.extend(hash_inputs(&tokenizer_paths(cfg))?);
    Ok((
        inputs,
        json!({ "windows": table.windows, "terms": table.terms }),
    ))
}

fn random_problem(n: usize, seed: u64) -> MleProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut contexts = Vec::with_capacity(n);
    while contexts.len() < n {
        let k = rng.gen_range(1..=8u32);
        let counts: BTreeMap<TokenId, u64> = (0..k).map(|w| (w, rng.gen_range(0..=100))).collect();
        if counts.values().any(|&c| c > 0) {
            contexts.push(ContextCounts {
                id: format!("random-{}", contexts.len()),
                counts,
            });
        }
    }
    MleProblem { contexts }
}

fn verify_mle(cfg: &RunConfig, args: &MleArgs, out: &mut Outputs) -> Step {
    let (problem, inputs) = match &args.data {
        Some(p) => {
            let files = tree_files(p)?;
            let mut problem = MleProblem::default();
            for f in &files {
                problem
                    .contexts
                    .extend(MleProblem::from_data_tree(&DataTree::load(f)?).contexts);
            }
            (problem, hash_inputs(&files)?)
        }
        None => (random_problem(args.random, cfg.rng_seed), Vec::new()),
    };
    let report = mle::mle_verify(&problem, args.tol, args.lr, args.iters);
    println!(
        "worst deviation {:e} over {} contexts (tol {:e}): {}",
        report.worst_deviation,
        report.contexts,
        report.tol,
        if report.passed { "pass" } else { "FAIL" }
    );
    out.write("mle/report.json", &pretty(&report))?;
    Ok((
        inputs,
        json!({ "passed": report.passed, "worst_deviation": report.worst_deviation }),
    ))
}
