//! Embedding sets, providers and native-style prefix truncation.
//!
//! File format: one JSON header line
//! `{"dimension", "model_id", "mode", "normalized", "provenance"}` followed
//! by one `{"code", "vector"}` object per line in taxonomy order.

mod provider;
mod remote;

pub use provider::{
    embed_corpus, hash_random_vector, hierarchy_synthetic_set, hierarchy_synthetic_vector,
    ProviderConfig, ProviderKind, API_KEY_ENV, DEFAULT_SYNTHETIC_DIMENSION,
};
pub use remote::{cache_key, EmbeddingCache, RemoteClient, RetryPolicy, MAX_INPUT_BYTES};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::preprocess::Mode;
use crate::taxonomy::{Code, TaxonomyError};

pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("wire error: {0}")]
    Wire(String),
    #[error("transient failure after {attempts} attempts: {message}")]
    RetriesExhausted { attempts: u32, message: String },
    #[error("dimension mismatch: expected {expected}, got {got} for {code}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        code: String,
    },
    #[error("cache corrupt at line {line}: {message}")]
    CacheCorrupt { line: usize, message: String },
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("input for {code} is {bytes} bytes, above the {limit}-byte limit")]
    InputTooLong {
        code: String,
        bytes: usize,
        limit: usize,
    },
    #[error("cannot normalize zero vector prefix for {0}")]
    ZeroPrefix(String),
    #[error("vector for {code} not unit norm (norm {norm})")]
    NotNormalized { code: String, norm: f64 },
    #[error("empty embedding set")]
    Empty,
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dimension: usize,
    model_id: String,
    mode: Mode,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<Value>,
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    code: Code,
    vector: Vec<f64>,
}

/// Code → vector map sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: BTreeMap<Code, Vec<f64>>,
    dimension: usize,
    pub model_id: String,
    pub mode: Mode,
    normalized: bool,
    /// Steps that produced this set (provider, reductions), oldest first.
    pub provenance: Vec<Value>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl EmbeddingSet {
    pub fn new(
        vectors: BTreeMap<Code, Vec<f64>>,
        model_id: impl Into<String>,
        mode: Mode,
        normalized: bool,
    ) -> Result<EmbeddingSet, EmbedError> {
        let dimension = vectors.values().next().ok_or(EmbedError::Empty)?.len();
        if dimension == 0 {
            return Err(EmbedError::Format {
                line: 0,
                message: "zero-dimensional vectors".into(),
            });
        }
        for (code, v) in &vectors {
            if v.len() != dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: dimension,
                    got: v.len(),
                    code: code.to_string(),
                });
            }
            if normalized {
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(EmbedError::NotNormalized {
                        code: code.to_string(),
                        norm,
                    });
                }
            }
        }
        Ok(EmbeddingSet {
            vectors,
            dimension,
            model_id: model_id.into(),
            mode,
            normalized,
            provenance: Vec::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, code: &Code) -> Option<&[f64]> {
        self.vectors.get(code).map(Vec::as_slice)
    }

    pub fn codes(&self) -> impl Iterator<Item = &Code> {
        self.vectors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Code, &[f64])> {
        self.vectors.iter().map(|(c, v)| (c, v.as_slice()))
    }

    pub fn vectors(&self) -> &BTreeMap<Code, Vec<f64>> {
        &self.vectors
    }

    /// Same metadata, new vectors (which may change dimension).
    pub fn with_vectors(
        &self,
        vectors: BTreeMap<Code, Vec<f64>>,
        normalized: bool,
        step: Option<Value>,
    ) -> Result<EmbeddingSet, EmbedError> {
        let mut out = EmbeddingSet::new(vectors, self.model_id.clone(), self.mode, normalized)?;
        out.provenance = self.provenance.clone();
        out.provenance.extend(step);
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), EmbedError> {
        let header = Header {
            dimension: self.dimension,
            model_id: self.model_id.clone(),
            mode: self.mode,
            normalized: self.normalized,
            provenance: self.provenance.clone(),
        };
        let fmt_err = |e: serde_json::Error| EmbedError::Format {
            line: 0,
            message: e.to_string(),
        };
        serde_json::to_writer(&mut w, &header).map_err(fmt_err)?;
        w.write_all(b"\n")?;
        for (code, vector) in &self.vectors {
            serde_json::to_writer(
                &mut w,
                &VectorLine {
                    code: code.clone(),
                    vector: vector.clone(),
                },
            )
            .map_err(fmt_err)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: impl BufRead) -> Result<EmbeddingSet, EmbedError> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(EmbedError::Empty)?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| EmbedError::Format {
            line: 1,
            message: e.to_string(),
        })?;
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VectorLine = serde_json::from_str(&line).map_err(|e| EmbedError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            if v.vector.len() != header.dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: header.dimension,
                    got: v.vector.len(),
                    code: v.code.to_string(),
                });
            }
            if vectors.insert(v.code.clone(), v.vector).is_some() {
                return Err(EmbedError::Format {
                    line: i + 1,
                    message: format!("duplicate code {}", v.code),
                });
            }
        }
        let mut set = EmbeddingSet::new(vectors, header.model_id, header.mode, header.normalized)?;
        set.provenance = header.provenance;
        Ok(set)
    }
}

/// Keeps the first `target_dim` coordinates and rescales to unit norm.
pub fn truncate_renormalize(
    e: &EmbeddingSet,
    target_dim: usize,
) -> Result<EmbeddingSet, EmbedError> {
    if target_dim == 0 || target_dim > e.dimension() {
        return Err(EmbedError::Config(format!(
            "target dimension {target_dim} outside 1..={}",
            e.dimension()
        )));
    }
    let mut out = BTreeMap::new();
    for (code, v) in e.iter() {
        let prefix = &v[..target_dim];
        let norm = l2_norm(prefix);
        if norm == 0.0 {
            return Err(EmbedError::ZeroPrefix(code.to_string()));
        }
        out.insert(code.clone(), prefix.iter().map(|x| x / norm).collect());
    }
    e.with_vectors(
        out,
        true,
        Some(serde_json::json!({"method": "native_truncate", "dimensions": target_dim})),
    )
}
