//! PCA baseline on mean-centered vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{from_matrix, to_matrix, ReduceError, ReductionConfig};
use crate::embed::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub dimensions: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { dimensions: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `n x k` projections onto the leading components.
    pub scores: Array2<f64>,
    /// Eigenvalues of the sample covariance, descending.
    pub explained_variance: Vec<f64>,
}

/// Leading `k` principal components. Each component's sign is chosen so its
/// largest-magnitude score is positive.
pub fn pca_matrix(data: ArrayView2<f64>, k: usize) -> Result<PcaResult, ReduceError> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(ReduceError::TooFewPoints { needed: 2, got: n });
    }
    if k == 0 || k > d.min(n) {
        return Err(ReduceError::Config(format!(
            "pca dimensions {k} must be in [1, {}]",
            d.min(n)
        )));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let x = DMatrix::from_fn(n, d, |i, j| data[[i, j]] - mean[j]);
    let denom = (n - 1) as f64;

    // Work with whichever of XᵀX and XXᵀ is smaller.
    let (scores, values) = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x / denom);
        let order = descending(eig.eigenvalues.as_slice());
        let comps = DMatrix::from_fn(d, k, |r, c| eig.eigenvectors[(r, order[c])]);
        (
            &x * comps,
            order[..k]
                .iter()
                .map(|&i| eig.eigenvalues[i])
                .collect::<Vec<_>>(),
        )
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = descending(eig.eigenvalues.as_slice());
        let s = DMatrix::from_fn(n, k, |r, c| {
            let lam = eig.eigenvalues[order[c]].max(0.0);
            eig.eigenvectors[(r, order[c])] * lam.sqrt()
        });
        (
            s,
            order[..k]
                .iter()
                .map(|&i| eig.eigenvalues[i] / denom)
                .collect(),
        )
    };

    let mut out = Array2::from_shape_fn((n, k), |(i, j)| scores[(i, j)]);
    for mut col in out.columns_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(PcaResult {
        scores: out,
        explained_variance: values,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn pca(e: &EmbeddingSet, cfg: &PcaConfig) -> Result<EmbeddingSet, ReduceError> {
    let (codes, data) = to_matrix(e);
    let r = pca_matrix(data.view(), cfg.dimensions)?;
    from_matrix(e, &codes, &r.scores, &ReductionConfig::Pca(*cfg))
}
