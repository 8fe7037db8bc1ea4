//! Versioned binary container shared by data trees and probed trees.
//!
//! Layout: `MAGIC`, version (u32 LE), kind tag (u8), kind-specific body,
//! then a SHA-256 of everything before it. All integers are little-endian.

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"LANTREE\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = MAGIC.len() + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    DataTree = 1,
    GptTree = 2,
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tree file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("wrong tree kind: expected tag {expected}, found {found}")]
    WrongKind { expected: u8, found: u8 },
    #[error("corrupt tree file: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind as u8);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version, kind and checksum; positions at the body.
    pub fn open(bytes: &'a [u8], kind: Kind) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(ContainerError::Corrupt(
                "file truncated inside header".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(content).as_slice() != digest {
            return Err(ContainerError::Corrupt(
                "checksum mismatch (truncated or modified file)".into(),
            ));
        }
        if content[12] != kind as u8 {
            return Err(ContainerError::WrongKind {
                expected: kind as u8,
                found: content[12],
            });
        }
        Ok(Self {
            body: content,
            pos: HEADER_LEN,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.body.len())
            .ok_or_else(|| {
                ContainerError::Corrupt(format!("unexpected end of data at byte {}", self.pos))
            })?;
        let out = &self.body[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, ContainerError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String, ContainerError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ContainerError::Corrupt("string field is not UTF-8".into()))
    }

    pub fn expect_end(&self) -> Result<(), ContainerError> {
        if self.pos == self.body.len() {
            Ok(())
        } else {
            Err(ContainerError::Corrupt(format!(
                "{} trailing bytes after node stream",
                self.body.len() - self.pos
            )))
        }
    }
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>, ContainerError> {
    std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}
