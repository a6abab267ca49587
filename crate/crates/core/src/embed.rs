//! Token-level embedding backends.
//!
//! The pretrained encoders are frozen and live outside this crate; a backend
//! either replays matrices exported by such an encoder (`precomputed_file`)
//! or maps every token id to a fixed pseudo-random unit vector
//! (`hashed_projection`).
//!
//! Precomputed file layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "PFEMB\0v1"
//! dim     u32
//! count   u64
//! count × record:
//!   id_len u32, id bytes (UTF-8), modality u8, seq_len u32,
//!   seq_len × dim f64 (row-major)
//! ```
//!
//! A record with id `*` serves every sample for its modality (useful for the
//! constant instruction).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{EmbeddingMatrix, Modality, TokenSequence};

pub const PRECOMPUTED_MAGIC: &[u8; 8] = b"PFEMB\0v1";
pub const WILDCARD_ID: &str = "*";

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(
        &self,
        sample_id: &str,
        tokens: &TokenSequence,
        modality: Modality,
    ) -> Result<EmbeddingMatrix>;
}

pub fn embed_patch(
    embedder: &dyn Embedder,
    sample_id: &str,
    tokens: &TokenSequence,
) -> Result<EmbeddingMatrix> {
    embedder.embed(sample_id, tokens, Modality::Patch)
}

pub fn embed_text(
    embedder: &dyn Embedder,
    sample_id: &str,
    tokens: &TokenSequence,
    modality: Modality,
) -> Result<EmbeddingMatrix> {
    debug_assert!(modality != Modality::Patch);
    embedder.embed(sample_id, tokens, modality)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    PrecomputedFile,
    #[default]
    HashedProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderBackend {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub source_path: Option<PathBuf>,
}

impl Default for EmbedderBackend {
    fn default() -> Self {
        EmbedderBackend {
            kind: EmbedderKind::HashedProjection,
            dim: 256,
            seed: 7,
            source_path: None,
        }
    }
}

impl EmbedderBackend {
    pub fn build(&self, expected_dim: usize) -> Result<Box<dyn Embedder>> {
        if self.dim != expected_dim {
            return Err(Error::InvalidHyperParams(format!(
                "embedder dim {} does not match model dim {expected_dim}",
                self.dim
            )));
        }
        match self.kind {
            EmbedderKind::HashedProjection => Ok(Box::new(HashedProjection::new(self.dim, self.seed))),
            EmbedderKind::PrecomputedFile => {
                let path = self.source_path.as_ref().ok_or_else(|| {
                    Error::InvalidHyperParams("precomputed_file backend needs source_path".into())
                })?;
                let store = PrecomputedEmbeddings::load(path)?;
                if store.dim() != self.dim {
                    return Err(Error::EmbeddingFile {
                        path: path.clone(),
                        reason: format!("file dim {} != configured dim {}", store.dim(), self.dim),
                    });
                }
                Ok(Box::new(store))
            }
        }
    }
}

/// Every token id maps to a reproducible pseudo-random unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedProjection {
    dim: usize,
    seed: u64,
}

impl HashedProjection {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashedProjection { dim, seed }
    }

    pub fn token_vector(&self, token: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng::substream_seed(self.seed, "token", u64::from(token)));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashedProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _sample_id: &str, tokens: &TokenSequence, modality: Modality) -> Result<EmbeddingMatrix> {
        if tokens.is_empty() {
            return Ok(EmbeddingMatrix::sentinel(self.dim, modality));
        }
        let mut values = DMatrix::zeros(tokens.len(), self.dim);
        for (row, &tok) in tokens.tokens().iter().enumerate() {
            for (col, x) in self.token_vector(tok).into_iter().enumerate() {
                values[(row, col)] = x;
            }
        }
        EmbeddingMatrix::new(values, modality)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    records: HashMap<(String, Modality), DMatrix<f64>>,
}

fn file_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::EmbeddingFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        PrecomputedEmbeddings {
            dim,
            records: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, sample_id: &str, modality: Modality, values: DMatrix<f64>) {
        assert_eq!(values.ncols(), self.dim, "record width must equal dim");
        self.records.insert((sample_id.to_string(), modality), values);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        let mut keys: Vec<_> = self.records.keys().collect();
        keys.sort_by(|a, b| (&a.0, a.1.code()).cmp(&(&b.0, b.1.code())));
        let mut write = || -> std::io::Result<()> {
            out.write_all(PRECOMPUTED_MAGIC)?;
            out.write_all(&(self.dim as u32).to_le_bytes())?;
            out.write_all(&(keys.len() as u64).to_le_bytes())?;
            for key in &keys {
                let m = &self.records[*key];
                out.write_all(&(key.0.len() as u32).to_le_bytes())?;
                out.write_all(key.0.as_bytes())?;
                out.write_all(&[key.1.code()])?;
                out.write_all(&(m.nrows() as u32).to_le_bytes())?;
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        out.write_all(&m[(r, c)].to_le_bytes())?;
                    }
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut input = BufReader::new(file);
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            input
                .read_exact(&mut buf)
                .map_err(|_| file_err(path, "unexpected end of file"))?;
            Ok(buf)
        };
        if read(8)?.as_slice() != PRECOMPUTED_MAGIC {
            return Err(file_err(path, "bad magic (expected PFEMB v1)"));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
        let dim = u32_at(read(4)?) as usize;
        let count = u64::from_le_bytes(read(8)?.try_into().unwrap());
        let mut store = PrecomputedEmbeddings::new(dim);
        for _ in 0..count {
            let id_len = u32_at(read(4)?) as usize;
            let id = String::from_utf8(read(id_len)?).map_err(|_| file_err(path, "id is not UTF-8"))?;
            let modality = Modality::from_code(read(1)?[0]).ok_or_else(|| file_err(path, "bad modality code"))?;
            let rows = u32_at(read(4)?) as usize;
            if rows == 0 {
                return Err(file_err(path, format!("record {id:?} has zero rows")));
            }
            let raw = read(rows * dim * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(file_err(path, format!("record {id:?} has non-finite values")));
            }
            store
                .records
                .insert((id, modality), DMatrix::from_row_slice(rows, dim, &values));
        }
        Ok(store)
    }
}

impl Embedder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sample_id: &str, _tokens: &TokenSequence, modality: Modality) -> Result<EmbeddingMatrix> {
        let values = self
            .records
            .get(&(sample_id.to_string(), modality))
            .or_else(|| self.records.get(&(WILDCARD_ID.to_string(), modality)))
            .ok_or_else(|| Error::BackendMissingEntry {
                sample_id: sample_id.to_string(),
                modality: modality.to_string(),
            })?;
        EmbeddingMatrix::new(values.clone(), modality)
    }
}
