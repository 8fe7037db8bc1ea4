//! Exact-match accuracy of greedy answers, with and without a perturbed
//! question terminator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arith::{perturb_last_token, QaPair, QUESTION_PREFIX};
use super::AnalysisError;
use crate::corpus::{chunk_corpus, ChunkConfig, Document};
use crate::data_tree::{build_data_tree, BuildConfig, OccurrenceMode};
use crate::probe::{FrequencyOracle, ProbeClient};
use crate::tokenizer::{TokenId, Tokenizer};

pub const MAX_NEW_TOKENS: usize = 16;
pub const DEFAULT_REPLACEMENT: &str = "\u{3002}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prompt: String,
    pub output: String,
    pub correct: bool,
    /// Set when the backend failed on this item; the item counts as wrong.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasItem {
    pub question: String,
    pub answer: String,
    pub original: Outcome,
    pub perturbed: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n: usize,
    pub acc_original: f64,
    pub acc_perturbed: Option<f64>,
    pub replacement: Option<String>,
    pub failures: usize,
    pub items: Vec<BiasItem>,
}

/// Greedy-decodes an answer for every pair (and, when `perturb` is given,
/// for the pair with its final `.` replaced) and grades it by exact match
/// after trimming surrounding whitespace.
pub fn bias_eval(
    client: &ProbeClient,
    pairs: &[QaPair],
    perturb: Option<&str>,
) -> Result<BiasReport, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::Empty("no QA pairs to evaluate"));
    }
    let stop = client.tokenize("\n")?;
    if stop.is_empty() {
        return Err(AnalysisError::Empty(
            "backend tokenizes a line break to nothing",
        ));
    }
    let items: Vec<BiasItem> = pairs
        .par_iter()
        .map(|pair| {
            let original = answer(client, &pair.prompt(), &pair.answer, &stop);
            let perturbed = perturb.map(|r| match perturb_last_token(&pair.question, r) {
                Ok(q) => answer(client, &format!("{q}\n"), &pair.answer, &stop),
                Err(e) => Outcome {
                    prompt: pair.question.clone(),
                    output: String::new(),
                    correct: false,
                    error: Some(e.to_string()),
                },
            });
            BiasItem {
                question: pair.question.clone(),
                answer: pair.answer.clone(),
                original,
                perturbed,
            }
        })
        .collect();
    let n = items.len();
    let accuracy = |hits: usize| hits as f64 / n as f64;
    let acc_original = accuracy(items.iter().filter(|i| i.original.correct).count());
    let acc_perturbed = perturb.map(|_| {
        accuracy(
            items
                .iter()
                .filter(|i| i.perturbed.as_ref().is_some_and(|o| o.correct))
                .count(),
        )
    });
    let failures = items
        .iter()
        .flat_map(|i| std::iter::once(&i.original).chain(&i.perturbed))
        .filter(|o| o.error.is_some())
        .count();
    Ok(BiasReport {
        n,
        acc_original,
        acc_perturbed,
        replacement: perturb.map(str::to_string),
        failures,
        items,
    })
}

fn answer(client: &ProbeClient, prompt: &str, expected: &str, stop: &[TokenId]) -> Outcome {
    let run = || -> Result<String, AnalysisError> {
        let tokens = client.tokenize(prompt)?;
        let out = client.greedy_generate(&tokens, MAX_NEW_TOKENS, stop)?;
        let text = client.detokenize(&out)?;
        Ok(text.split('\n').next().unwrap_or("").to_string())
    };
    match run() {
        Ok(output) => Outcome {
            prompt: prompt.to_string(),
            correct: output.trim() == expected.trim(),
            output,
            error: None,
        },
        Err(e) => Outcome {
            prompt: prompt.to_string(),
            output: String::new(),
            correct: false,
            error: Some(e.to_string()),
        },
    }
}

/// A frequency oracle that has memorized `pairs`: a byte-level tokenizer
/// and one tree over the question texts, each pair being its own chunk.
pub fn qa_oracle(model_id: &str, pairs: &[QaPair]) -> Result<FrequencyOracle, AnalysisError> {
    let tokenizer = Tokenizer::byte_level(&[])?;
    let docs: Vec<Document> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| Document::new(format!("{i:08}"), p.corpus_text()))
        .collect();
    let longest = docs.iter().map(|d| d.text.len()).max().unwrap_or(1);
    let chunks = chunk_corpus(
        &docs,
        &tokenizer,
        ChunkConfig {
            chunk_len: longest,
            min_chars: 0,
            pack: false,
        },
    )?;
    let seed = tokenizer.tokenize(&QUESTION_PREFIX[..1])?[0];
    let tree = build_data_tree(
        &chunks,
        seed,
        tokenizer.hash(),
        BuildConfig {
            max_depth: longest + MAX_NEW_TOKENS,
            mode: OccurrenceMode::ChunkInitial,
        },
    )?;
    Ok(FrequencyOracle::new(model_id, tokenizer, [tree])
        .expect("tree built with the oracle tokenizer"))
}
