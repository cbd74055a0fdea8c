//! UMAP with an exact cosine kNN graph and the standard edge-sampling SGD
//! layout.

use nalgebra::{Matrix2, Vector2};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_nonzero, from_matrix, row_norms, to_matrix, InputMetric, ReduceError, ReductionConfig,
};
use crate::embed::EmbeddingSet;
use crate::seed::derive_seed;

pub const SMOOTH_KNN_TOLERANCE: f64 = 1e-5;
const SMOOTH_KNN_STEPS: usize = 64;
const MIN_SIGMA_SCALE: f64 = 1e-3;
const SPREAD: f64 = 1.0;
const INIT_RANGE: f64 = 10.0;
const GRAD_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapConfig {
    pub dimensions: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    pub input_metric: InputMetric,
    pub negative_sample_rate: usize,
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig {
            dimensions: 5,
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: 500,
            input_metric: InputMetric::Cosine,
            negative_sample_rate: 5,
            seed: 0,
        }
    }
}

impl UmapConfig {
    fn validate(&self, n: usize) -> Result<(), ReduceError> {
        if n < 3 {
            return Err(ReduceError::TooFewPoints { needed: 3, got: n });
        }
        if self.n_neighbors < 2 || self.n_neighbors >= n {
            return Err(ReduceError::Config(format!(
                "n_neighbors {} must be in [2, {})",
                self.n_neighbors, n
            )));
        }
        if !(0.0..=SPREAD).contains(&self.min_dist) {
            return Err(ReduceError::Config(format!(
                "min_dist {} must be in [0, 1]",
                self.min_dist
            )));
        }
        if self.dimensions == 0 || self.n_epochs == 0 {
            return Err(ReduceError::Config(
                "dimensions and n_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `k` nearest neighbours per row by `1 - cos`, self excluded, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl KnnGraph {
    /// Directed membership strengths `exp(-max(0, d - rho) / sigma)`.
    pub fn memberships(&self, rhos: &[f64], sigmas: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, (idx, ds)) in self.indices.iter().zip(&self.distances).enumerate() {
            for (&j, &d) in idx.iter().zip(ds) {
                out.push((i, j, (-(d - rhos[i]).max(0.0) / sigmas[i]).exp()));
            }
        }
        out
    }
}

pub fn knn(data: ArrayView2<f64>, k: usize) -> KnnGraph {
    let n = data.nrows();
    let norms = row_norms(&data.to_owned());
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        (1.0 - xi.dot(&data.row(j)) / (norms[i] * norms[j])).max(0.0),
                        j,
                    )
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            (
                cand.iter().map(|c| c.1).collect(),
                cand.iter().map(|c| c.0).collect(),
            )
        })
        .collect();
    let (indices, distances) = rows.into_iter().unzip();
    KnnGraph { indices, distances }
}

/// Per-row `(rho, sigma)`: `rho` is the nearest-neighbour distance and
/// `sigma` solves `Σ exp(-max(0, d - rho) / sigma) = log2(k)`.
pub fn smooth_knn(graph: &KnnGraph) -> (Vec<f64>, Vec<f64>) {
    graph
        .distances
        .par_iter()
        .map(|ds| {
            let k = ds.len();
            let target = (k as f64).log2();
            let rho = ds.first().copied().unwrap_or(0.0);
            let mass = |sigma: f64| {
                ds.iter()
                    .map(|d| (-(d - rho).max(0.0) / sigma).exp())
                    .sum::<f64>()
            };
            let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
            for _ in 0..SMOOTH_KNN_STEPS {
                let s = mass(mid);
                if (s - target).abs() < SMOOTH_KNN_TOLERANCE {
                    break;
                }
                if s > target {
                    hi = mid;
                    mid = (lo + hi) / 2.0;
                } else {
                    lo = mid;
                    mid = if hi.is_infinite() {
                        mid * 2.0
                    } else {
                        (lo + hi) / 2.0
                    };
                }
            }
            let mean = ds.iter().sum::<f64>() / k.max(1) as f64;
            (rho, mid.max(MIN_SIGMA_SCALE * mean).max(f64::MIN_POSITIVE))
        })
        .unzip()
}

/// Symmetrizes directed strengths with `a + b - a·b`. Returns both
/// directions of every edge, sorted by `(from, to)`.
pub fn fuzzy_union(directed: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64)> {
    use std::collections::BTreeMap;
    let mut m: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, w) in directed {
        m.insert((i, j), w);
    }
    let mut out = BTreeMap::new();
    for (&(i, j), &w) in &m {
        let back = m.get(&(j, i)).copied().unwrap_or(0.0);
        let u = w + back - w * back;
        out.insert((i, j), u);
        out.insert((j, i), u);
    }
    out.into_iter().map(|((i, j), w)| (i, j, w)).collect()
}

/// Least-squares fit of `1 / (1 + a x^{2b})` to the offset exponential
/// target on 300 points of `[0, 3]`, by Levenberg–Marquardt from `(1, 1)`.
pub fn fit_ab(min_dist: f64) -> (f64, f64) {
    let n = 300;
    let xs: Vec<f64> = (0..n)
        .map(|i| 3.0 * SPREAD * i as f64 / (n - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / SPREAD).exp()
            }
        })
        .collect();
    let cost = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut current = cost(a, b);
    for _ in 0..10_000 {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (&x, &y) in xs.iter().zip(&ys) {
            let (da, db, r) = if x == 0.0 {
                (0.0, 0.0, 1.0 - y)
            } else {
                let p = x.powf(2.0 * b);
                let den = 1.0 + a * p;
                let f = 1.0 / den;
                (-p / (den * den), -a * p * 2.0 * x.ln() / (den * den), f - y)
            };
            let j = Vector2::new(da, db);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut lhs = jtj;
            lhs[(0, 0)] *= 1.0 + lambda;
            lhs[(1, 1)] *= 1.0 + lambda;
            let Some(step) = lhs.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let (na, nb) = (a + step[0], b + step[1]);
            let c = cost(na, nb);
            if c.is_finite() && c <= current {
                let small = step.norm() <= 1e-15 * (1.0 + a.hypot(b));
                a = na;
                b = nb;
                let gain = current - c;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !small && gain > 0.0;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

/// Full UMAP on raw rows. The output is mean-centered.
pub fn umap_run(data: ArrayView2<f64>, cfg: &UmapConfig) -> Result<Array2<f64>, ReduceError> {
    let n = data.nrows();
    cfg.validate(n)?;
    let first = data.row(0);
    if data.rows().into_iter().all(|r| r == first) {
        return Err(ReduceError::Degenerate);
    }
    let graph = knn(data, cfg.n_neighbors);
    let (rhos, sigmas) = smooth_knn(&graph);
    let mut edges = fuzzy_union(&graph.memberships(&rhos, &sigmas));
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    if max_w <= 0.0 {
        return Err(ReduceError::Degenerate);
    }
    edges.retain(|e| e.2 >= max_w / cfg.n_epochs as f64);
    let (a, b) = fit_ab(cfg.min_dist);

    let dims = cfg.dimensions;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "umap/init"));
    let mut y: Vec<f64> = (0..n * dims)
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();

    let per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let neg_rate = cfg.negative_sample_rate as f64;
    let per_negative: Vec<f64> = per_sample.iter().map(|p| p / neg_rate).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "umap/negative"));
    let clip = |v: f64| v.clamp(-GRAD_CLIP, GRAD_CLIP);
    let mut delta = vec![0.0; dims];

    for epoch in 0..cfg.n_epochs {
        let alpha = 1.0 - epoch as f64 / cfg.n_epochs as f64;
        let e = epoch as f64;
        for (idx, &(j, k, _)) in edges.iter().enumerate() {
            if next_sample[idx] > e {
                continue;
            }
            let d2 = sq_dist(&y, j, k, dims);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for (t, dl) in delta.iter_mut().enumerate() {
                *dl = clip(coeff * (y[j * dims + t] - y[k * dims + t])) * alpha;
            }
            for (t, dl) in delta.iter().enumerate() {
                y[j * dims + t] += dl;
                y[k * dims + t] -= dl;
            }
            next_sample[idx] += per_sample[idx];

            if cfg.negative_sample_rate > 0 {
                let count = ((e - next_negative[idx]) / per_negative[idx]).max(0.0) as usize;
                for _ in 0..count {
                    let other = rng.random_range(0..n);
                    if other == j {
                        continue;
                    }
                    let d2 = sq_dist(&y, j, other, dims);
                    if d2 <= 0.0 {
                        continue;
                    }
                    let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                    for t in 0..dims {
                        y[j * dims + t] +=
                            clip(coeff * (y[j * dims + t] - y[other * dims + t])) * alpha;
                    }
                }
                next_negative[idx] += count as f64 * per_negative[idx];
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ReduceError::NonFinite);
    }
    for t in 0..dims {
        let mean = (0..n).map(|i| y[i * dims + t]).sum::<f64>() / n as f64;
        for i in 0..n {
            y[i * dims + t] -= mean;
        }
    }
    Ok(Array2::from_shape_vec((n, dims), y).expect("shape matches"))
}

fn sq_dist(y: &[f64], i: usize, j: usize, dims: usize) -> f64 {
    (0..dims)
        .map(|t| (y[i * dims + t] - y[j * dims + t]).powi(2))
        .sum()
}

pub fn umap(e: &EmbeddingSet, cfg: &UmapConfig) -> Result<EmbeddingSet, ReduceError> {
    let (codes, data) = to_matrix(e);
    check_nonzero(&codes, &data)?;
    let out = umap_run(data.view(), cfg)?;
    from_matrix(e, &codes, &out, &ReductionConfig::Umap(cfg.clone()))
}
