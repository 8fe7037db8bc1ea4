//! Python bindings. Reports cross the boundary as plain dicts.

use std::path::PathBuf;
use std::sync::Arc;

use lantree::analysis::{self, ArithOp, Term};
use lantree::corpus::{chunk_corpus, ChunkConfig, Document};
use lantree::data_tree::{build_data_tree_parallel, BuildConfig, OccurrenceMode};
use lantree::gpt_tree::{flatten_model, FlattenConfig};
use lantree::mle::{MleProblem, DEFAULT_ITERS, DEFAULT_LR};
use lantree::probe::{
    ClientOptions, FrequencyOracle, HttpTransport, ProbeCache, ProbeClient, Transport,
};
use lantree::viz::{self, ProbTree, SankeyOptions};
use lantree::{metrics, TokenId};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(_lantree, LantreeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    LantreeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Tokenizer", module = "lantree", frozen, skip_from_py_object)]
struct PyTokenizer(lantree::Tokenizer);

#[pymethods]
impl PyTokenizer {
    /// Whitespace vocabulary covering every word of `texts`.
    #[staticmethod]
    fn from_texts(texts: Vec<String>) -> Self {
        Self(lantree::Tokenizer::whitespace_from_texts(
            texts.iter().map(String::as_str),
        ))
    }

    /// The 256-entry byte table.
    #[staticmethod]
    fn byte_level() -> PyResult<Self> {
        lantree::Tokenizer::byte_level(&[]).map(Self).map_err(err)
    }

    /// `kind` is "whitespace" or "byte_bpe".
    #[staticmethod]
    #[pyo3(signature = (kind, vocab, merges=None))]
    fn load(kind: &str, vocab: PathBuf, merges: Option<PathBuf>) -> PyResult<Self> {
        let kind = match kind {
            "whitespace" => lantree::TokenizerKind::Whitespace,
            "byte_bpe" => lantree::TokenizerKind::ByteBpe,
            other => return Err(err(format!("unknown tokenizer kind {other:?}"))),
        };
        lantree::Tokenizer::load(kind, &vocab, merges.as_deref())
            .map(Self)
            .map_err(err)
    }

    #[pyo3(signature = (vocab, merges=None))]
    fn save(&self, vocab: PathBuf, merges: Option<PathBuf>) -> PyResult<()> {
        self.0.save(&vocab, merges.as_deref()).map_err(err)
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.0.tokenize(text).map_err(err)
    }

    fn detokenize(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.0.detokenize(&ids).map_err(err)
    }

    fn label(&self, id: TokenId) -> PyResult<String> {
        self.0.label(id).map_err(err)
    }

    fn id_of(&self, token: &str) -> Option<TokenId> {
        self.0.id_of(token)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    #[getter]
    fn hash(&self) -> &str {
        self.0.hash()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tokenizer(kind={:?}, vocab_size={})",
            self.0.kind(),
            self.0.vocab_size()
        )
    }
}

#[pyclass(name = "DataTree", module = "lantree", frozen, skip_from_py_object)]
struct PyDataTree(lantree::DataTree);

#[pymethods]
impl PyDataTree {
    /// Chunks `docs` (a list of texts or of `(id, text)` pairs) and counts
    /// every path of up to `max_depth` tokens after `seed`.
    #[staticmethod]
    #[pyo3(signature = (docs, tokenizer, seed, max_depth=10, mode="any_occurrence", chunk_len=2048, min_chars=0, workers=1))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        docs: &Bound<'_, PyAny>,
        tokenizer: &PyTokenizer,
        seed: TokenId,
        max_depth: usize,
        mode: &str,
        chunk_len: usize,
        min_chars: usize,
        workers: usize,
    ) -> PyResult<Self> {
        let docs = documents(docs)?;
        let chunks = chunk_corpus(
            &docs,
            &tokenizer.0,
            ChunkConfig {
                chunk_len,
                min_chars,
                pack: false,
            },
        )
        .map_err(err)?;
        let mode: OccurrenceMode = mode.parse().map_err(err)?;
        build_data_tree_parallel(
            &chunks,
            seed,
            tokenizer.0.hash(),
            BuildConfig { max_depth, mode },
            workers,
        )
        .map(Self)
        .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        lantree::DataTree::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lantree::DataTree::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// `(count, total)` for `next` after `context`, or None when the context
    /// was never observed.
    fn conditional_prob(
        &self,
        context: Vec<TokenId>,
        next: TokenId,
    ) -> PyResult<Option<(u64, u64)>> {
        Ok(self
            .0
            .conditional_prob(&context, next)
            .map_err(err)?
            .map(|f| (f.count, f.total)))
    }

    fn top_k(&self, context: Vec<TokenId>, k: usize) -> PyResult<Option<Vec<(TokenId, u64, u64)>>> {
        Ok(self
            .0
            .top_k_children(&context, k)
            .map_err(err)?
            .map(|v| v.into_iter().map(|(t, f)| (t, f.count, f.total)).collect()))
    }

    fn merge(&self, other: &PyDataTree) -> PyResult<Self> {
        lantree::DataTree::merge(&[self.0.clone(), other.0.clone()])
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn seed(&self) -> TokenId {
        self.0.seed
    }

    #[getter]
    fn count(&self) -> u64 {
        self.0.root.count
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.0.node_count()
    }

    fn __eq__(&self, other: &PyDataTree) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "DataTree(seed={}, count={}, nodes={})",
            self.0.seed,
            self.0.root.count,
            self.0.node_count()
        )
    }
}

fn documents(docs: &Bound<'_, PyAny>) -> PyResult<Vec<Document>> {
    let mut out = Vec::new();
    for (i, item) in docs.try_iter()?.enumerate() {
        let item = item?;
        out.push(match item.extract::<String>() {
            Ok(text) => Document::new(format!("{i:08}"), text),
            Err(_) => {
                let (id, text): (String, String) = item.extract()?;
                Document::new(id, text)
            }
        });
    }
    Ok(out)
}

#[pyclass(name = "GptTree", module = "lantree", frozen, skip_from_py_object)]
struct PyGptTree(lantree::gpt_tree::GptTree);

#[pymethods]
impl PyGptTree {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        lantree::gpt_tree::GptTree::load(&path)
            .map(Self)
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lantree::gpt_tree::GptTree::from_json(text)
            .map(Self)
            .map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// Product of edge probabilities along `path` (which starts with the seed).
    fn path_prob(&self, path: Vec<TokenId>) -> Option<f64> {
        self.0.path_prob(&path)
    }

    #[getter]
    fn seed(&self) -> TokenId {
        self.0.seed
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.0.node_count()
    }

    #[getter]
    fn backend<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.backend)
    }

    fn __eq__(&self, other: &PyGptTree) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "GptTree(seed={}, depth={}, branch={}, nodes={})",
            self.0.seed,
            self.0.shape.depth,
            self.0.shape.branch,
            self.0.node_count()
        )
    }
}

fn flatten(
    py: Python<'_>,
    transport: Arc<dyn Transport>,
    model: &str,
    seed: TokenId,
    config: FlattenConfig,
) -> PyResult<PyGptTree> {
    let options = ClientOptions {
        cache: ProbeCache::from_env(),
        ..ClientOptions::default()
    };
    py.detach(|| {
        let client = ProbeClient::connect(transport, model, options).map_err(|e| e.to_string())?;
        flatten_model(&client, seed, &config).map_err(|e| e.to_string())
    })
    .map(PyGptTree)
    .map_err(err)
}

/// Probes an in-process frequency oracle serving `trees`.
#[pyfunction]
#[pyo3(signature = (trees, tokenizer, seed, depth=5, branch=5))]
fn flatten_oracle(
    py: Python<'_>,
    trees: Vec<PyRef<'_, PyDataTree>>,
    tokenizer: &PyTokenizer,
    seed: TokenId,
    depth: usize,
    branch: usize,
) -> PyResult<PyGptTree> {
    let oracle = FrequencyOracle::new(
        "oracle",
        tokenizer.0.clone(),
        trees.iter().map(|t| t.0.clone()),
    )
    .map_err(err)?;
    flatten(
        py,
        Arc::new(oracle),
        "oracle",
        seed,
        FlattenConfig {
            depth,
            branch,
            checkpoint: None,
        },
    )
}

/// Probes a model served over HTTP. With `checkpoint`, an interrupted run
/// can be resumed by calling again with the same arguments.
#[pyfunction]
#[pyo3(signature = (url, model, seed, depth=5, branch=5, checkpoint=None))]
fn flatten_http(
    py: Python<'_>,
    url: &str,
    model: &str,
    seed: TokenId,
    depth: usize,
    branch: usize,
    checkpoint: Option<PathBuf>,
) -> PyResult<PyGptTree> {
    flatten(
        py,
        Arc::new(HttpTransport::new(url)),
        model,
        seed,
        FlattenConfig {
            depth,
            branch,
            checkpoint,
        },
    )
}

#[pyfunction]
fn compare<'py>(
    py: Python<'py>,
    gpt: &PyGptTree,
    data: &PyDataTree,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::compare(&gpt.0, &data.0).map_err(err)?)
}

/// Fits a softmax table to the data tree's counts and checks it against the
/// count ratios.
#[pyfunction]
#[pyo3(signature = (data, tol=1e-4, lr=DEFAULT_LR, iters=DEFAULT_ITERS))]
fn mle_verify<'py>(
    py: Python<'py>,
    data: &PyDataTree,
    tol: f64,
    lr: f64,
    iters: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let problem = MleProblem::from_data_tree(&data.0);
    let report = py.detach(|| lantree::mle::mle_verify(&problem, tol, lr, iters));
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (n, seed=0, ops="+-*/"))]
fn gen_arithmetic_qa(n: usize, seed: u64, ops: &str) -> PyResult<Vec<(String, String)>> {
    let ops = ArithOp::parse_set(ops).map_err(err)?;
    Ok(analysis::gen_arithmetic_qa(n, seed, &ops)
        .map_err(err)?
        .into_iter()
        .map(|p| (p.question, p.answer))
        .collect())
}

#[pyfunction]
fn evaluate_question(question: &str) -> PyResult<String> {
    analysis::evaluate_question(question)
        .map(|e| e.render())
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (question, replacement=analysis::DEFAULT_REPLACEMENT))]
fn perturb_last_token(question: &str, replacement: &str) -> PyResult<String> {
    analysis::perturb_last_token(question, replacement).map_err(err)
}

/// Window co-occurrence counts for `terms` over the tokenized `docs`.
#[pyfunction]
#[pyo3(signature = (docs, tokenizer, terms, window=64, chunk_len=2048))]
fn cooccur<'py>(
    py: Python<'py>,
    docs: &Bound<'py, PyAny>,
    tokenizer: &PyTokenizer,
    terms: Vec<String>,
    window: usize,
    chunk_len: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let docs = documents(docs)?;
    let chunks = chunk_corpus(
        &docs,
        &tokenizer.0,
        ChunkConfig {
            chunk_len,
            min_chars: 0,
            pack: false,
        },
    )
    .map_err(err)?;
    let terms = terms
        .iter()
        .map(|t| Term::parse(&tokenizer.0, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    to_py(
        py,
        &analysis::cooccur(&chunks, &terms, window).map_err(err)?,
    )
}

fn sankey_doc(
    tree: &Bound<'_, PyAny>,
    tokenizer: &PyTokenizer,
    options: SankeyOptions,
) -> PyResult<viz::SankeyDoc> {
    let tree: &dyn ProbTree = if let Ok(t) = tree.cast::<PyDataTree>() {
        &t.get().0
    } else if let Ok(t) = tree.cast::<PyGptTree>() {
        &t.get().0
    } else {
        return Err(err("expected a DataTree or GptTree"));
    };
    viz::tree_to_sankey(tree, &tokenizer.0, &options).map_err(err)
}

/// `{"nodes": [...], "links": [...]}` for either tree type.
#[pyfunction]
#[pyo3(signature = (tree, tokenizer, max_depth=5, max_children=5, floor=viz::DEFAULT_FLOOR))]
fn sankey<'py>(
    py: Python<'py>,
    tree: &Bound<'py, PyAny>,
    tokenizer: &PyTokenizer,
    max_depth: usize,
    max_children: usize,
    floor: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &sankey_doc(
            tree,
            tokenizer,
            SankeyOptions {
                max_depth,
                max_children,
                floor,
            },
        )?,
    )
}

/// Self-contained HTML page drawing the diagram.
#[pyfunction]
#[pyo3(signature = (tree, tokenizer, max_depth=5, max_children=5, floor=viz::DEFAULT_FLOOR))]
fn sankey_html(
    tree: &Bound<'_, PyAny>,
    tokenizer: &PyTokenizer,
    max_depth: usize,
    max_children: usize,
    floor: f64,
) -> PyResult<String> {
    Ok(viz::render_html(&sankey_doc(
        tree,
        tokenizer,
        SankeyOptions {
            max_depth,
            max_children,
            floor,
        },
    )?))
}

#[pymodule]
fn _lantree(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LantreeError", m.py().get_type::<LantreeError>())?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyDataTree>()?;
    m.add_class::<PyGptTree>()?;
    m.add_function(wrap_pyfunction!(flatten_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(flatten_http, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(mle_verify, m)?)?;
    m.add_function(wrap_pyfunction!(gen_arithmetic_qa, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_question, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_last_token, m)?)?;
    m.add_function(wrap_pyfunction!(cooccur, m)?)?;
    m.add_function(wrap_pyfunction!(sankey, m)?)?;
    m.add_function(wrap_pyfunction!(sankey_html, m)?)?;
    Ok(())
}
