//! Frozen text representations: pooled vectors and optional per-token states.
//!
//! Two little-endian binary files carry them:
//!
//! * pooled (`MTEB`): `u32 version=1`, `u64 count`, `u32 dim`, then
//!   `count x dim` `f32`, then `count` length-prefixed UTF-8 ids;
//! * states (`MTES`): `u32 version=1`, `u64 count`, `u32 dim`, then per
//!   item a length-prefixed id, `u32 len` and `len x dim` `f32`.
//!
//! Length prefixes are `u32` byte counts.

mod remote;

pub use remote::{EmbeddingClient, RemoteEmbeddings, RetryPolicy, EMBED_URL_ENV};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::binio::{self, BinFormatError, ByteReader};
use crate::corpus::CodeRegistry;
use crate::numcore::Matrix;

pub const POOLED_MAGIC: &[u8; 4] = b"MTEB";
pub const STATES_MAGIC: &[u8; 4] = b"MTES";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TextEncError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: BinFormatError,
    },
    #[error("text embeddings: {0}")]
    Invalid(String),
    #[error("embedding service: {0}")]
    Service(String),
    #[error("embedding service contract: {0}")]
    Contract(String),
}

/// Per-token states for one code, `len x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStates {
    pub len: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    pooled: Vec<f32>,
    index: HashMap<String, usize>,
    state_ids: Vec<String>,
    states: HashMap<String, TokenStates>,
}

impl TextEmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            pooled: Vec::new(),
            index: HashMap::new(),
            state_ids: Vec::new(),
            states: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert_pooled(&mut self, id: &str, vector: &[f32]) -> Result<(), TextEncError> {
        if vector.len() != self.dim {
            return Err(TextEncError::Invalid(format!(
                "{id}: pooled vector has dim {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(TextEncError::Invalid(format!("{id}: non-finite pooled value")));
        }
        if self.index.contains_key(id) {
            return Err(TextEncError::Invalid(format!("duplicate pooled id {id}")));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.pooled.extend_from_slice(vector);
        Ok(())
    }

    pub fn insert_states(&mut self, id: &str, len: usize, values: Vec<f32>) -> Result<(), TextEncError> {
        if len == 0 || values.len() != len * self.dim {
            return Err(TextEncError::Invalid(format!(
                "{id}: {} state values do not form {len} rows of dim {}",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TextEncError::Invalid(format!("{id}: non-finite state value")));
        }
        if self.states.contains_key(id) {
            return Err(TextEncError::Invalid(format!("duplicate state id {id}")));
        }
        self.state_ids.push(id.to_string());
        self.states.insert(id.to_string(), TokenStates { len, values });
        Ok(())
    }

    pub fn pooled(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.pooled[i * self.dim..(i + 1) * self.dim])
    }

    pub fn states(&self, id: &str) -> Option<&TokenStates> {
        self.states.get(id)
    }

    pub fn has_states(&self) -> bool {
        !self.states.is_empty()
    }

    /// Pooled vector as a `1 x dim` matrix.
    pub fn pooled_matrix(&self, id: &str) -> Option<Matrix> {
        self.pooled(id)
            .map(|v| Matrix::from_f32(1, self.dim, v).expect("validated on insert"))
    }

    /// Per-token states as `len x dim`, falling back to the pooled vector as
    /// a length-1 sequence when a code has no states.
    pub fn state_matrix(&self, id: &str) -> Option<Matrix> {
        match self.states.get(id) {
            Some(s) => Some(Matrix::from_f32(s.len, self.dim, &s.values).expect("validated on insert")),
            None => self.pooled_matrix(id),
        }
    }

    /// Every registry code must have a pooled vector.
    pub fn check_covers(&self, registry: &CodeRegistry) -> Result<(), TextEncError> {
        let missing: Vec<&str> = registry.code_ids().filter(|id| !self.index.contains_key(*id)).collect();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(5).copied().collect();
            return Err(TextEncError::Invalid(format!(
                "{} registry codes lack a pooled text embedding (first: {})",
                missing.len(),
                shown.join(", ")
            )));
        }
        Ok(())
    }

    pub fn pooled_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.pooled.len() * 4);
        out.extend_from_slice(POOLED_MAGIC);
        binio::put_u32(&mut out, FORMAT_VERSION);
        binio::put_u64(&mut out, self.ids.len() as u64);
        binio::put_u32(&mut out, self.dim as u32);
        binio::put_f32s(&mut out, &self.pooled);
        for id in &self.ids {
            binio::put_string(&mut out, id);
        }
        out
    }

    pub fn states_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATES_MAGIC);
        binio::put_u32(&mut out, FORMAT_VERSION);
        binio::put_u64(&mut out, self.state_ids.len() as u64);
        binio::put_u32(&mut out, self.dim as u32);
        for id in &self.state_ids {
            let s = &self.states[id];
            binio::put_string(&mut out, id);
            binio::put_u32(&mut out, s.len as u32);
            binio::put_f32s(&mut out, &s.values);
        }
        out
    }

    /// SHA-256 over both serialized payloads.
    pub fn digest(&self) -> String {
        let mut all = self.pooled_bytes();
        all.extend(self.states_bytes());
        binio::sha256_hex(&all)
    }

    pub fn save(&self, pooled_path: &Path, states_path: Option<&Path>) -> Result<(), TextEncError> {
        write_file(pooled_path, &self.pooled_bytes())?;
        if let Some(p) = states_path {
            write_file(p, &self.states_bytes())?;
        }
        Ok(())
    }

    /// Parses a pooled file.
    pub fn from_pooled_bytes(bytes: &[u8]) -> Result<Self, BinFormatError> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(POOLED_MAGIC)?;
        read_version(&mut r)?;
        let count = r.u64("count")? as usize;
        let dim = r.u32("dim")? as usize;
        let values = r.f32s(
            count.checked_mul(dim).ok_or_else(|| r.error("count x dim overflows"))?,
            "pooled vectors",
        )?;
        let mut set = TextEmbeddingSet::new(dim);
        for i in 0..count {
            let at = r.offset();
            let id = r.string("code id")?;
            set.insert_pooled(&id, &values[i * dim..(i + 1) * dim])
                .map_err(|e| BinFormatError {
                    offset: at,
                    message: e.to_string(),
                })?;
        }
        r.finish()?;
        Ok(set)
    }

    /// Parses a states file into this set. Its dimension must match.
    pub fn add_states_bytes(&mut self, bytes: &[u8]) -> Result<(), BinFormatError> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STATES_MAGIC)?;
        read_version(&mut r)?;
        let count = r.u64("count")?;
        let at = r.offset();
        let dim = r.u32("dim")? as usize;
        if dim != self.dim {
            return Err(BinFormatError {
                offset: at,
                message: format!("states dim {dim} differs from pooled dim {}", self.dim),
            });
        }
        for _ in 0..count {
            let at = r.offset();
            let id = r.string("code id")?;
            let len = r.u32("state length")? as usize;
            let n = len.checked_mul(dim).ok_or_else(|| r.error("len x dim overflows"))?;
            let values = r.f32s(n, "state values")?;
            self.insert_states(&id, len, values).map_err(|e| BinFormatError {
                offset: at,
                message: e.to_string(),
            })?;
        }
        r.finish()
    }
}

fn read_version(r: &mut ByteReader<'_>) -> Result<(), BinFormatError> {
    let at = r.offset();
    let v = r.u32("version")?;
    if v != FORMAT_VERSION {
        return Err(BinFormatError {
            offset: at,
            message: format!("unsupported version {v}"),
        });
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TextEncError> {
    fs::write(path, bytes).map_err(|source| TextEncError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, TextEncError> {
    fs::read(path).map_err(|source| TextEncError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a pooled file and, optionally, a states file.
pub fn load_text_embeddings(
    pooled_path: &Path,
    states_path: Option<&Path>,
) -> Result<TextEmbeddingSet, TextEncError> {
    let bytes = read_file(pooled_path)?;
    let mut set = TextEmbeddingSet::from_pooled_bytes(&bytes).map_err(|source| TextEncError::Format {
        path: pooled_path.to_path_buf(),
        source,
    })?;
    if let Some(p) = states_path {
        let bytes = read_file(p)?;
        set.add_states_bytes(&bytes).map_err(|source| TextEncError::Format {
            path: p.to_path_buf(),
            source,
        })?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TextEmbeddingSet {
        let mut s = TextEmbeddingSet::new(8);
        for (i, id) in ["ICD9:1", "ICD9:2", "ATC:A"].iter().enumerate() {
            let v: Vec<f32> = (0..8).map(|j| (i * 8 + j) as f32 * 0.125 - 1.0).collect();
            s.insert_pooled(id, &v).unwrap();
        }
        s.insert_states("ICD9:2", 2, (0..16).map(|j| j as f32).collect()).unwrap();
        s
    }

    #[test]
    fn three_vectors_dim_eight() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pooled.bin");
        sample().save(&p, None).unwrap();
        let loaded = load_text_embeddings(&p, None).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.dim(), 8);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (p, s) = (dir.path().join("p.bin"), dir.path().join("s.bin"));
        let set = sample();
        set.save(&p, Some(&s)).unwrap();
        let loaded = load_text_embeddings(&p, Some(&s)).unwrap();
        assert_eq!(loaded, set);
        assert_eq!(loaded.pooled_bytes(), fs::read(&p).unwrap());
        assert_eq!(loaded.states_bytes(), fs::read(&s).unwrap());
    }

    #[test]
    fn truncation_reports_exact_offset() {
        let bytes = sample().pooled_bytes();
        // cut inside the vector block: header is 4 + 4 + 8 + 4 = 20 bytes
        let err = TextEmbeddingSet::from_pooled_bytes(&bytes[..30]).unwrap_err();
        assert_eq!(err.offset, 20);
        let err = TextEmbeddingSet::from_pooled_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        // the last id "ATC:A" (5 bytes) starts after its 4-byte prefix
        assert_eq!(err.offset, bytes.len() - 5);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().pooled_bytes();
        bytes[0] = b'X';
        let err = TextEmbeddingSet::from_pooled_bytes(&bytes).unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(err.message.contains("magic"));
    }

    #[test]
    fn states_dim_mismatch() {
        let mut other = TextEmbeddingSet::new(4);
        other.insert_pooled("ICD9:1", &[0.0; 4]).unwrap();
        other.insert_states("ICD9:1", 1, vec![0.0; 4]).unwrap();
        let mut set = sample();
        assert!(set.add_states_bytes(&other.states_bytes()).is_err());
    }

    #[test]
    fn state_matrix_falls_back_to_pooled() {
        let set = sample();
        assert_eq!(set.state_matrix("ICD9:1").unwrap().shape(), (1, 8));
        assert_eq!(set.state_matrix("ICD9:2").unwrap().shape(), (2, 8));
        assert!(set.state_matrix("nope").is_none());
    }
}
