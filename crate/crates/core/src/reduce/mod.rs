//! Dimensionality reduction of embedding sets.
//!
//! Config files are JSON objects tagged by `method`:
//!
//! ```json
//! {"method": "tsne", "dimensions": 5, "perplexity": 11}
//! {"method": "umap", "n_neighbors": 15, "min_dist": 0.1}
//! {"method": "native_truncate", "dimensions": 5}
//! {"method": "pca", "dimensions": 5}
//! ```
//!
//! Omitted keys take their defaults. Unknown methods and unknown keys are
//! rejected at parse time.

mod pca;
mod tsne;
mod umap;

pub use pca::{pca, pca_matrix, PcaConfig, PcaResult};
pub use tsne::{
    conditional_probabilities, input_distances, joint_probabilities, kl_divergence, row_perplexity,
    tsne, tsne_gradient, tsne_run, TsneConfig, TsneRun, P_FLOOR,
};
pub use umap::{
    fit_ab, fuzzy_union, knn, smooth_knn, umap, umap_run, KnnGraph, UmapConfig,
    SMOOTH_KNN_TOLERANCE,
};

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{truncate_renormalize, EmbedError, EmbeddingSet};
use crate::taxonomy::Code;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("perplexity {perplexity} infeasible for {n} points (must be in (0, n))")]
    Perplexity { perplexity: f64, n: usize },
    #[error("duplicate input vectors: {}", .0.iter().map(|g| g.join("=")).collect::<Vec<_>>().join(", "))]
    DuplicateVectors(Vec<Vec<String>>),
    #[error("all input points are identical")]
    Degenerate,
    #[error("zero input vector for {0}")]
    ZeroVector(String),
    #[error("non-finite values during optimization")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid reduction config: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMetric {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncateConfig {
    pub dimensions: usize,
}

impl Default for TruncateConfig {
    fn default() -> Self {
        TruncateConfig { dimensions: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ReductionConfig {
    Tsne(TsneConfig),
    Umap(UmapConfig),
    NativeTruncate(TruncateConfig),
    Pca(PcaConfig),
}

impl ReductionConfig {
    pub fn from_json(text: &str) -> Result<ReductionConfig, ReduceError> {
        serde_json::from_str(text).map_err(|e| ReduceError::Config(e.to_string()))
    }

    /// Default config for a method name.
    pub fn for_method(method: &str) -> Result<ReductionConfig, ReduceError> {
        ReductionConfig::from_json(&format!(
            r#"{{"method": {}}}"#,
            serde_json::Value::from(method)
        ))
    }

    pub fn method(&self) -> &'static str {
        match self {
            ReductionConfig::Tsne(_) => "tsne",
            ReductionConfig::Umap(_) => "umap",
            ReductionConfig::NativeTruncate(_) => "native_truncate",
            ReductionConfig::Pca(_) => "pca",
        }
    }

    pub fn dimensions(&self) -> usize {
        match self {
            ReductionConfig::Tsne(c) => c.dimensions,
            ReductionConfig::Umap(c) => c.dimensions,
            ReductionConfig::NativeTruncate(c) => c.dimensions,
            ReductionConfig::Pca(c) => c.dimensions,
        }
    }

    pub fn set_dimensions(&mut self, dims: usize) {
        match self {
            ReductionConfig::Tsne(c) => c.dimensions = dims,
            ReductionConfig::Umap(c) => c.dimensions = dims,
            ReductionConfig::NativeTruncate(c) => c.dimensions = dims,
            ReductionConfig::Pca(c) => c.dimensions = dims,
        }
    }

    /// Seed of the stochastic methods; `None` for deterministic ones.
    pub fn seed(&self) -> Option<u64> {
        match self {
            ReductionConfig::Tsne(c) => Some(c.seed),
            ReductionConfig::Umap(c) => Some(c.seed),
            _ => None,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ReductionConfig::Tsne(c) => c.seed = seed,
            ReductionConfig::Umap(c) => c.seed = seed,
            _ => {}
        }
    }
}

/// Runs the configured method. The result's provenance gains
/// `{"method", "config"}`.
pub fn reduce(e: &EmbeddingSet, cfg: &ReductionConfig) -> Result<EmbeddingSet, ReduceError> {
    match cfg {
        ReductionConfig::Tsne(c) => tsne(e, c),
        ReductionConfig::Umap(c) => umap(e, c),
        ReductionConfig::Pca(c) => pca(e, c),
        ReductionConfig::NativeTruncate(c) => {
            let mut out = truncate_renormalize(e, c.dimensions)?;
            out.provenance.pop();
            out.provenance.push(step(cfg));
            Ok(out)
        }
    }
}

pub(crate) fn step(cfg: &ReductionConfig) -> serde_json::Value {
    serde_json::json!({"method": cfg.method(), "config": cfg})
}

/// Rows in code order.
pub(crate) fn to_matrix(e: &EmbeddingSet) -> (Vec<Code>, Array2<f64>) {
    let n = e.len();
    let d = e.dimension();
    let codes: Vec<Code> = e.codes().cloned().collect();
    let mut m = Array2::zeros((n, d));
    for (i, (_, v)) in e.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            m[[i, j]] = *x;
        }
    }
    (codes, m)
}

pub(crate) fn from_matrix(
    e: &EmbeddingSet,
    codes: &[Code],
    m: &Array2<f64>,
    cfg: &ReductionConfig,
) -> Result<EmbeddingSet, ReduceError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(ReduceError::NonFinite);
    }
    let vectors: BTreeMap<Code, Vec<f64>> = codes
        .iter()
        .cloned()
        .zip(m.rows().into_iter().map(|r| r.to_vec()))
        .collect();
    Ok(e.with_vectors(vectors, false, Some(step(cfg)))?)
}

/// Groups of codes whose vectors are exactly equal.
pub(crate) fn duplicate_groups(codes: &[Code], m: &Array2<f64>) -> Vec<Vec<String>> {
    let mut order: Vec<usize> = (0..codes.len()).collect();
    let row_cmp = |a: &usize, b: &usize| {
        m.row(*a)
            .iter()
            .zip(m.row(*b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_by(row_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && m.row(order[i]) == m.row(order[j]) {
            j += 1;
        }
        if j - i > 1 {
            let mut g: Vec<String> = order[i..j].iter().map(|&k| codes[k].to_string()).collect();
            g.sort();
            groups.push(g);
        }
        i = j;
    }
    groups.sort();
    groups
}

pub(crate) fn check_nonzero(codes: &[Code], m: &Array2<f64>) -> Result<(), ReduceError> {
    for (code, row) in codes.iter().zip(m.rows()) {
        if row.iter().all(|x| *x == 0.0) {
            return Err(ReduceError::ZeroVector(code.to_string()));
        }
    }
    Ok(())
}

pub(crate) fn row_norms(m: &Array2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}
