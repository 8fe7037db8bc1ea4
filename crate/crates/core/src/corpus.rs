//! Document ingestion and training-window chunking.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{TokenSeq, Tokenizer, TokenizerError};

pub const DEFAULT_CHUNK_LEN: usize = 2048;
pub const DEFAULT_MIN_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to tokenize document {doc_id}: {source}")]
    Tokenize {
        doc_id: String,
        source: TokenizerError,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("{path}:{line}: bad record: {message}")]
    BadRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("chunk_len must be at least 1")]
    ZeroChunkLen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// A training window cut from one document (or, when packing, starting in
/// one document).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: String,
    /// Token index of the first token within its document (or within the
    /// packed stream).
    pub offset: usize,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_len: usize,
    pub min_chars: usize,
    /// Concatenate documents (sorted by id) before slicing.
    pub pack: bool,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_len: DEFAULT_CHUNK_LEN,
            min_chars: DEFAULT_MIN_CHARS,
            pack: false,
        }
    }
}

/// Tokenizes `doc` once and slices it into consecutive windows of
/// `chunk_len` tokens. A window whose source character span is shorter than
/// `min_chars` is dropped.
pub fn chunk_document(
    doc: &Document,
    tokenizer: &Tokenizer,
    chunk_len: usize,
    min_chars: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    if chunk_len == 0 {
        return Err(CorpusError::ZeroChunkLen);
    }
    let spans = tokenize_doc(doc, tokenizer)?;
    let mut out = Vec::new();
    for (w, window) in spans.chunks(chunk_len).enumerate() {
        let span = window[0].1.start..window[window.len() - 1].1.end;
        if char_count(&doc.text, span) < min_chars {
            continue;
        }
        out.push(Chunk {
            doc_id: doc.id.clone(),
            offset: w * chunk_len,
            tokens: window.iter().map(|(id, _)| *id).collect(),
        });
    }
    Ok(out)
}

fn tokenize_doc(
    doc: &Document,
    tokenizer: &Tokenizer,
) -> Result<Vec<(u32, Range<usize>)>, CorpusError> {
    tokenizer
        .tokenize_with_spans(&doc.text)
        .map_err(|source| CorpusError::Tokenize {
            doc_id: doc.id.clone(),
            source,
        })
}

/// Number of characters whose first byte lies in `span`.
fn char_count(text: &str, span: Range<usize>) -> usize {
    text.as_bytes()[span]
        .iter()
        .filter(|&&b| (b as i8) >= -0x40)
        .count()
}

/// Chunks a whole corpus. Documents are processed in parallel and the
/// result is ordered by document id, then offset.
pub fn chunk_corpus(
    docs: &[Document],
    tokenizer: &Tokenizer,
    config: ChunkConfig,
) -> Result<Vec<Chunk>, CorpusError> {
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(CorpusError::DuplicateId(w[0].id.clone()));
    }
    if config.pack {
        return pack_documents(&order, tokenizer, config.chunk_len, config.min_chars);
    }
    let per_doc = order
        .par_iter()
        .map(|d| chunk_document(d, tokenizer, config.chunk_len, config.min_chars))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Concatenates the token streams of `docs` (already in id order) and slices
/// the joint stream. Each chunk is attributed to the document it starts in;
/// its character span is the sum of the per-document spans it touches.
fn pack_documents(
    docs: &[&Document],
    tokenizer: &Tokenizer,
    chunk_len: usize,
    min_chars: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    if chunk_len == 0 {
        return Err(CorpusError::ZeroChunkLen);
    }
    let spans = docs
        .par_iter()
        .map(|d| tokenize_doc(d, tokenizer))
        .collect::<Result<Vec<_>, _>>()?;
    // (doc index, token id, byte span)
    let stream: Vec<(usize, u32, Range<usize>)> = spans
        .into_iter()
        .enumerate()
        .flat_map(|(d, s)| s.into_iter().map(move |(id, r)| (d, id, r)))
        .collect();
    let mut out = Vec::new();
    for (w, window) in stream.chunks(chunk_len).enumerate() {
        let mut chars = 0;
        let mut piece_start = 0;
        for i in 1..=window.len() {
            if i == window.len() || window[i].0 != window[piece_start].0 {
                let doc = docs[window[piece_start].0];
                let span = window[piece_start].2.start..window[i - 1].2.end;
                chars += char_count(&doc.text, span);
                piece_start = i;
            }
        }
        if chars < min_chars {
            continue;
        }
        out.push(Chunk {
            doc_id: docs[window[0].0].id.clone(),
            offset: w * chunk_len,
            tokens: window.iter().map(|(_, id, _)| *id).collect(),
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
}

/// Reads newline-delimited `{"id": ..., "text": ...}` records.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(Document::new(rec.id, rec.text));
    }
    Ok(docs)
}

/// Walks `dir` for `.txt` files; each file's path relative to `dir` is its id.
pub fn read_text_dir(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: dir.display().to_string(),
            source: e.into(),
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "txt") {
            continue;
        }
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rel = path.strip_prefix(dir).unwrap_or(path);
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        docs.push(Document::new(id, text));
    }
    Ok(docs)
}

/// Loads every input path: directories are walked, anything else is read
/// as JSONL. Fails on duplicate ids across inputs.
pub fn read_corpus(paths: &[impl AsRef<Path>]) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if p.is_dir() {
            docs.extend(read_text_dir(p)?);
        } else {
            docs.extend(read_jsonl(p)?);
        }
    }
    let mut seen = BTreeSet::new();
    for d in &docs {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ws(texts: &[&str]) -> Tokenizer {
        Tokenizer::whitespace_from_texts(texts.iter().copied())
    }

    #[test]
    fn hand_enumerated_slices() {
        let tok = ws(&["a b c d e"]);
        let doc = Document::new("d", "a b c d e");
        let chunks = chunk_document(&doc, &tok, 2, 0).unwrap();
        let words: Vec<String> = chunks
            .iter()
            .map(|c| tok.detokenize(&c.tokens).unwrap())
            .collect();
        assert_eq!(words, vec!["a b", "c d", "e"]);
        assert_eq!(
            chunks.iter().map(|c| c.offset).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn empty_document_has_no_chunks() {
        let tok = ws(&["a"]);
        assert!(chunk_document(&Document::new("e", ""), &tok, 4, 0)
            .unwrap()
            .is_empty());
        assert!(chunk_document(&Document::new("e", "  \n"), &tok, 4, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn window_sizes_for_5000_tokens() {
        // 5000 one-character words: the 904-token tail spans 1807 chars.
        let text = vec!["x"; 5000].join(" ");
        let tok = ws(&["x"]);
        let chunks = chunk_document(&Document::new("d", text), &tok, 2048, 200).unwrap();
        let lens: Vec<usize> = chunks.iter().map(|c| c.tokens.len()).collect();
        assert_eq!(lens, vec![2048, 2048, 904]);
    }

    #[test]
    fn short_tail_is_discarded_by_characters() {
        // Tail of 2 tokens spans "x x" = 3 chars.
        let text = ["x"; 6].join(" ");
        let tok = ws(&["x"]);
        let doc = Document::new("d", text);
        assert_eq!(chunk_document(&doc, &tok, 4, 3).unwrap().len(), 2);
        assert_eq!(chunk_document(&doc, &tok, 4, 4).unwrap().len(), 1);
        // whole document shorter than min_chars
        assert!(chunk_document(&doc, &tok, 100, 200).unwrap().is_empty());
    }

    #[test]
    fn multibyte_characters_count_once() {
        let tok = Tokenizer::byte_level(&[]).unwrap();
        let doc = Document::new("d", "。。");
        assert_eq!(chunk_document(&doc, &tok, 6, 2).unwrap().len(), 1);
        assert!(chunk_document(&doc, &tok, 6, 3).unwrap().is_empty());
    }

    #[test]
    fn zero_chunk_len_rejected() {
        let tok = ws(&["a"]);
        assert!(matches!(
            chunk_document(&Document::new("d", "a"), &tok, 0, 0),
            Err(CorpusError::ZeroChunkLen)
        ));
    }

    #[test]
    fn corpus_sorted_by_id_and_duplicates_rejected() {
        let tok = ws(&["a b"]);
        let docs = vec![Document::new("z", "a"), Document::new("b", "b a")];
        let cfg = ChunkConfig {
            chunk_len: 8,
            min_chars: 0,
            pack: false,
        };
        let chunks = chunk_corpus(&docs, &tok, cfg).unwrap();
        assert_eq!(chunks[0].doc_id, "b");
        assert_eq!(chunks[1].doc_id, "z");
        let dup = vec![Document::new("a", "a"), Document::new("a", "b")];
        assert!(matches!(
            chunk_corpus(&dup, &tok, cfg),
            Err(CorpusError::DuplicateId(_))
        ));
    }

    #[test]
    fn packing_joins_documents() {
        let tok = ws(&["a b c"]);
        let docs = vec![Document::new("1", "a b"), Document::new("2", "c a b")];
        let cfg = ChunkConfig {
            chunk_len: 3,
            min_chars: 0,
            pack: true,
        };
        let chunks = chunk_corpus(&docs, &tok, cfg).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(tok.detokenize(&chunks[0].tokens).unwrap(), "a b c");
        assert_eq!(chunks[0].doc_id, "1");
        assert_eq!(chunks[1].doc_id, "2");
        assert_eq!(chunks[1].offset, 3);
        // "a b" (3 chars) + "c" (1 char)
        let strict = ChunkConfig {
            min_chars: 5,
            ..cfg
        };
        assert!(chunk_corpus(&docs, &tok, strict).unwrap().is_empty());
    }

    #[test]
    fn jsonl_and_directory_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let jl = dir.path().join("c.jsonl");
        fs::write(
            &jl,
            "{\"id\":\"x\",\"text\":\"a b\"}\n\n{\"id\":\"y\",\"text\":\"c\"}\n",
        )
        .unwrap();
        let docs = read_jsonl(&jl).unwrap();
        assert_eq!(docs.len(), 2);
        fs::write(&jl, "{\"id\":\"x\"}\n").unwrap();
        assert!(matches!(
            read_jsonl(&jl),
            Err(CorpusError::BadRecord { line: 1, .. })
        ));

        let txt = dir.path().join("txt");
        fs::create_dir_all(txt.join("sub")).unwrap();
        fs::write(txt.join("b.txt"), "b").unwrap();
        fs::write(txt.join("sub/a.txt"), "a").unwrap();
        fs::write(txt.join("skip.md"), "no").unwrap();
        let docs = read_text_dir(&txt).unwrap();
        let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, vec!["b.txt", "sub/a.txt"]);
    }

    proptest! {
        #[test]
        fn chunks_are_prefix_exact(words in proptest::collection::vec(0u8..4, 0..60), len in 1usize..9) {
            let text: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            let text = text.join(" ");
            let tok = Tokenizer::whitespace_from_texts(["w0 w1 w2 w3"]);
            let doc = Document::new("d", text.clone());
            let chunks = chunk_document(&doc, &tok, len, 0).unwrap();
            let joined: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.clone()).collect();
            prop_assert_eq!(joined, tok.tokenize(&text).unwrap());
            for c in &chunks {
                prop_assert!(!c.tokens.is_empty() && c.tokens.len() <= len);
            }
        }
    }
}
