//! Behavioural harnesses: arithmetic QA with a perturbed terminator, and
//! term co-occurrence statistics.

mod arith;
mod bias;
mod cooccur;

use thiserror::Error;

pub use arith::{
    evaluate_expression, evaluate_question, gen_arithmetic_qa, perturb_last_token, read_qa_jsonl,
    render_answer, render_decimal, write_qa_jsonl, ArithOp, Evaluated, QaPair, QUESTION_PREFIX,
};
pub use bias::{
    bias_eval, qa_oracle, BiasItem, BiasReport, Outcome, DEFAULT_REPLACEMENT, MAX_NEW_TOKENS,
};
pub use cooccur::{cooccur, CooccurTable, PairCount, Term};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Empty(&'static str),
    #[error("unknown operator {0:?}")]
    UnknownOp(String),
    #[error("cannot parse {input:?}: {message}")]
    Parse { input: String, message: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("question {0:?} does not end with '.'")]
    NoTerminator(String),
    #[error("term {0:?} is not in the tokenizer vocabulary")]
    UnknownTerm(String),
    #[error("QA line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    DataTree(#[from] crate::data_tree::DataTreeError),
}
