//! Pluggable tokenizers: a whitespace word tokenizer for toy corpora and a
//! GPT-2 style byte-level BPE loaded from vocab/merges files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Token identifier. Ids of a tokenizer are dense in `[0, vocab_size)`.
pub type TokenId = u32;

/// An ordered sequence of token ids.
pub type TokenSeq = Vec<TokenId>;

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab ids are not dense: expected id {expected}, found {found} for {token:?}")]
    SparseVocab {
        expected: TokenId,
        found: TokenId,
        token: String,
    },
    #[error("byte-level vocab is missing the symbol for byte 0x{0:02x}")]
    MissingByte(u8),
    #[error("merge rule {left:?} {right:?} on line {line} produces a token absent from the vocab")]
    MergeNotInVocab {
        line: usize,
        left: String,
        right: String,
    },
    #[error("malformed merge rule on line {line}: {text:?}")]
    BadMergeLine { line: usize, text: String },
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("symbol {0:?} has no vocab entry")]
    UnknownSymbol(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid vocab document {path}: {source}")]
    VocabFormat {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Whitespace,
    ByteBpe,
}

/// A loaded tokenizer: vocabulary, optional merge rules, and the matching
/// encode/decode routines.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    unk: Option<TokenId>,
    hash: String,
}

impl Tokenizer {
    /// Whitespace tokenizer over `vocab`. An `<unk>` entry is appended when
    /// the vocab lacks one.
    pub fn whitespace(vocab: BTreeMap<String, TokenId>) -> Result<Self, TokenizerError> {
        let mut tokens = dense_tokens(vocab)?;
        let unk = match tokens.iter().position(|t| t == UNK_TOKEN) {
            Some(i) => i as TokenId,
            None => {
                tokens.push(UNK_TOKEN.to_string());
                (tokens.len() - 1) as TokenId
            }
        };
        Ok(Self::assemble(
            TokenizerKind::Whitespace,
            tokens,
            Vec::new(),
            Some(unk),
        ))
    }

    /// Whitespace tokenizer whose vocab is every distinct word of `texts`,
    /// ids assigned in sorted word order.
    pub fn whitespace_from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        words.sort_unstable();
        words.dedup();
        let vocab = words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i as TokenId))
            .collect();
        Self::whitespace(vocab).expect("ids assigned densely")
    }

    /// Byte-level BPE from a GPT-2 style vocab and ordered merge rules.
    pub fn byte_bpe(
        vocab: BTreeMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self, TokenizerError> {
        let tokens = dense_tokens(vocab)?;
        let index: HashMap<&str, ()> = tokens.iter().map(|t| (t.as_str(), ())).collect();
        for b in 0..=255u8 {
            if !index.contains_key(byte_symbol(b).to_string().as_str()) {
                return Err(TokenizerError::MissingByte(b));
            }
        }
        for (line, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            if !index.contains_key(merged.as_str()) {
                return Err(TokenizerError::MergeNotInVocab {
                    line: line + 1,
                    left: l.clone(),
                    right: r.clone(),
                });
            }
        }
        Ok(Self::assemble(TokenizerKind::ByteBpe, tokens, merges, None))
    }

    /// The 256 byte symbols (GPT-2 id order) followed by one token per merge.
    pub fn byte_level(merges: &[(&str, &str)]) -> Result<Self, TokenizerError> {
        let mut vocab: BTreeMap<String, TokenId> = BYTE_ORDER
            .iter()
            .enumerate()
            .map(|(i, &b)| (byte_symbol(b).to_string(), i as TokenId))
            .collect();
        let mut rules = Vec::with_capacity(merges.len());
        for &(l, r) in merges {
            let merged = format!("{l}{r}");
            let next = vocab.len() as TokenId;
            vocab.entry(merged).or_insert(next);
            rules.push((l.to_string(), r.to_string()));
        }
        Self::byte_bpe(vocab, rules)
    }

    /// Loads a vocab document (JSON object token → id) and, for byte-level
    /// BPE, a merges file with one `left right` rule per line.
    pub fn load(
        kind: TokenizerKind,
        vocab_path: &Path,
        merges_path: Option<&Path>,
    ) -> Result<Self, TokenizerError> {
        let raw = read(vocab_path)?;
        let vocab: BTreeMap<String, TokenId> =
            serde_json::from_str(&raw).map_err(|source| TokenizerError::VocabFormat {
                path: vocab_path.display().to_string(),
                source,
            })?;
        match kind {
            TokenizerKind::Whitespace => Self::whitespace(vocab),
            TokenizerKind::ByteBpe => {
                let merges = match merges_path {
                    Some(p) => parse_merges(&read(p)?)?,
                    None => Vec::new(),
                };
                Self::byte_bpe(vocab, merges)
            }
        }
    }

    /// Writes the vocab document and, when merges exist, the merges file.
    pub fn save(
        &self,
        vocab_path: &Path,
        merges_path: Option<&Path>,
    ) -> Result<(), TokenizerError> {
        let vocab: BTreeMap<&str, TokenId> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as TokenId))
            .collect();
        let body = serde_json::to_string_pretty(&vocab).expect("map serializes");
        write(vocab_path, body.as_bytes())?;
        if let Some(p) = merges_path {
            let mut text = String::from("#version: 0.2\n");
            for (l, r) in &self.merges {
                text.push_str(l);
                text.push(' ');
                text.push_str(r);
                text.push('\n');
            }
            write(p, text.as_bytes())?;
        }
        Ok(())
    }

    fn assemble(
        kind: TokenizerKind,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        unk: Option<TokenId>,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        let mut hasher = Sha256::new();
        hasher.update(match kind {
            TokenizerKind::Whitespace => b"whitespace\n".as_slice(),
            TokenizerKind::ByteBpe => b"byte_bpe\n".as_slice(),
        });
        for t in &tokens {
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t.as_bytes());
        }
        hasher.update(b"merges\n");
        for (l, r) in &merges {
            hasher.update(l.as_bytes());
            hasher.update(b" ");
            hasher.update(r.as_bytes());
            hasher.update(b"\n");
        }
        let hash = hex::encode(hasher.finalize());
        Self {
            kind,
            tokens,
            index,
            merges,
            merge_ranks,
            unk,
            hash,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Stable content hash over kind, vocab and merges.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk
    }

    /// Raw vocab string of `id`.
    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a raw vocab string.
    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, TokenizerError> {
        Ok(self
            .tokenize_with_spans(text)?
            .into_iter()
            .map(|(id, _)| id)
            .collect())
    }

    /// Tokens paired with the byte range of `text` each one covers.
    pub fn tokenize_with_spans(
        &self,
        text: &str,
    ) -> Result<Vec<(TokenId, Range<usize>)>, TokenizerError> {
        match self.kind {
            TokenizerKind::Whitespace => Ok(self.whitespace_spans(text)),
            TokenizerKind::ByteBpe => self.bpe_spans(text),
        }
    }

    fn whitespace_spans(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let unk = self.unk.expect("whitespace tokenizer carries an unk id");
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in text
            .char_indices()
            .chain(std::iter::once((text.len(), ' ')))
        {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    let word = &text[s..i];
                    out.push((self.id_of(word).unwrap_or(unk), s..i));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        out
    }

    fn bpe_spans(&self, text: &str) -> Result<Vec<(TokenId, Range<usize>)>, TokenizerError> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            let symbols: Vec<String> = text.as_bytes()[piece.clone()]
                .iter()
                .map(|&b| byte_symbol(b).to_string())
                .collect();
            let mut at = piece.start;
            for sym in self.apply_merges(symbols) {
                let id = self
                    .id_of(&sym)
                    .ok_or_else(|| TokenizerError::UnknownSymbol(sym.clone()))?;
                let width = sym.chars().count();
                out.push((id, at..at + width));
                at += width;
            }
        }
        Ok(out)
    }

    fn apply_merges(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else {
                return symbols;
            };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        match self.kind {
            TokenizerKind::Whitespace => {
                let words = ids
                    .iter()
                    .map(|&id| self.token_str(id).ok_or(TokenizerError::UnknownId(id)))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(words.join(" "))
            }
            TokenizerKind::ByteBpe => {
                let bytes = self.token_bytes(ids)?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }

    /// Raw bytes behind a byte-level token sequence.
    pub fn token_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let s = self.token_str(id).ok_or(TokenizerError::UnknownId(id))?;
            match self.kind {
                TokenizerKind::Whitespace => bytes.extend_from_slice(s.as_bytes()),
                TokenizerKind::ByteBpe => {
                    for c in s.chars() {
                        bytes.push(
                            symbol_byte(c)
                                .ok_or_else(|| TokenizerError::UnknownSymbol(c.to_string()))?,
                        );
                    }
                }
            }
        }
        Ok(bytes)
    }

    /// Human-readable label for a single token. Byte sequences that are not
    /// valid UTF-8 on their own render as `<0xHH>` escapes.
    pub fn label(&self, id: TokenId) -> Result<String, TokenizerError> {
        let bytes = self.token_bytes(&[id])?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => e
                .into_bytes()
                .iter()
                .map(|b| format!("<0x{b:02X}>"))
                .collect(),
        })
    }

    /// Inverse of [`Tokenizer::label`].
    pub fn id_for_label(&self, label: &str) -> Option<TokenId> {
        match self.kind {
            TokenizerKind::Whitespace => self.id_of(label),
            TokenizerKind::ByteBpe => {
                let bytes = match parse_byte_escapes(label) {
                    Some(b) if std::str::from_utf8(&b).is_err() => b,
                    _ => label.as_bytes().to_vec(),
                };
                let sym: String = bytes.iter().map(|&b| byte_symbol(b)).collect();
                self.id_of(&sym)
            }
        }
    }
}

fn parse_byte_escapes(label: &str) -> Option<Vec<u8>> {
    let mut rest = label;
    let mut out = Vec::new();
    while !rest.is_empty() {
        let body = rest.strip_prefix("<0x")?;
        let hex = body.get(..2)?;
        out.push(u8::from_str_radix(hex, 16).ok()?);
        rest = body[2..].strip_prefix('>')?;
    }
    (!out.is_empty()).then_some(out)
}

fn dense_tokens(vocab: BTreeMap<String, TokenId>) -> Result<Vec<String>, TokenizerError> {
    let mut by_id: Vec<(TokenId, String)> = vocab.into_iter().map(|(t, i)| (i, t)).collect();
    by_id.sort();
    by_id
        .into_iter()
        .enumerate()
        .map(|(expected, (found, token))| {
            if expected as TokenId == found {
                Ok(token)
            } else {
                Err(TokenizerError::SparseVocab {
                    expected: expected as TokenId,
                    found,
                    token,
                })
            }
        })
        .collect()
}

fn parse_merges(text: &str) -> Result<Vec<(String, String)>, TokenizerError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || (i == 0 && line.starts_with("#version")) {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                out.push((l.to_string(), r.to_string()))
            }
            _ => {
                return Err(TokenizerError::BadMergeLine {
                    line: i + 1,
                    text: line.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, TokenizerError> {
    fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), TokenizerError> {
    fs::write(path, bytes).map_err(|source| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    })
}

// GPT-2 byte ↔ printable-symbol table. Printable latin-1 bytes map to
// themselves; the rest are shifted past U+0100 in byte order.
const BYTE_ORDER: [u8; 256] = byte_order();

const fn is_printable(b: u8) -> bool {
    matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF)
}

const fn byte_order() -> [u8; 256] {
    let mut out = [0u8; 256];
    let mut n = 0;
    let mut b = 0usize;
    while b < 256 {
        if is_printable(b as u8) {
            out[n] = b as u8;
            n += 1;
        }
        b += 1;
    }
    b = 0;
    while b < 256 {
        if !is_printable(b as u8) {
            out[n] = b as u8;
            n += 1;
        }
        b += 1;
    }
    out
}

pub(crate) fn byte_symbol(b: u8) -> char {
    if is_printable(b) {
        return b as char;
    }
    let shifted = (0..b).filter(|&x| !is_printable(x)).count() as u32;
    char::from_u32(256 + shifted).expect("below surrogate range")
}

fn symbol_byte(c: char) -> Option<u8> {
    let cp = c as u32;
    if cp < 256 && is_printable(cp as u8) {
        return Some(cp as u8);
    }
    let shifted = cp.checked_sub(256)? as usize;
    (0..=255u8).filter(|&x| !is_printable(x)).nth(shifted)
}

/// Splits text the way the GPT-2 pre-tokenizer regex does:
/// contractions, ` ?letters`, ` ?digits`, ` ?other`, then whitespace runs
/// that leave their final space to the following word.
fn pretokenize(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        if chars[i].1 == '\'' {
            let rest = &text[start + 1..];
            if let Some(len) = ["s", "t", "re", "ve", "m", "ll", "d"]
                .iter()
                .find(|c| rest.starts_with(*c))
                .map(|c| c.len())
            {
                out.push(start..start + 1 + len);
                i += 1 + len;
                continue;
            }
        }
        let body = if chars[i].1 == ' ' && i + 1 < chars.len() && !chars[i + 1].1.is_whitespace() {
            i + 1
        } else {
            i
        };
        let class = |c: char| {
            if c.is_alphabetic() {
                0
            } else if c.is_numeric() {
                1
            } else if c.is_whitespace() {
                3
            } else {
                2
            }
        };
        let body_class = class(chars[body].1);
        if body_class != 3 {
            let mut j = body + 1;
            while j < chars.len() && class(chars[j].1) == body_class {
                j += 1;
            }
            out.push(start..end_of(j));
            i = j;
            continue;
        }
        let mut j = i;
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        if j < chars.len() && j - i > 1 {
            j -= 1;
        }
        out.push(start..end_of(j));
        i = j;
    }
    out
}
