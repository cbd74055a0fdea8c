//! Exact O(N²) t-SNE.
//!
//! Input affinities use `d_ij = (1 - cos) / 2` in a Gaussian kernel
//! `exp(-beta_i * d_ij^2)` with `beta_i` bisected to the target perplexity.
//! The joint matrix `(P + Pᵀ) / 2N` is floored at [`P_FLOOR`] and
//! renormalized. Output affinities use a Student-t kernel with one degree of
//! freedom; optimization is plain momentum gradient descent with no gains.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_nonzero, duplicate_groups, from_matrix, row_norms, to_matrix, InputMetric, ReduceError,
    ReductionConfig,
};
use crate::embed::EmbeddingSet;
use crate::seed::derive_seed;

pub const P_FLOOR: f64 = 1e-12;
const PERPLEXITY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 64;
const INIT_STD: f64 = 1e-4;
const TRACE_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub dimensions: usize,
    pub early_exaggeration: f64,
    pub early_exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub iterations: usize,
    pub perplexity: f64,
    pub input_metric: InputMetric,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            dimensions: 5,
            early_exaggeration: 5.0,
            early_exaggeration_iters: 1450,
            initial_momentum: 0.9,
            final_momentum: 0.9,
            iterations: 1480,
            perplexity: 11.0,
            input_metric: InputMetric::Cosine,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

impl TsneConfig {
    fn validate(&self, n: usize) -> Result<(), ReduceError> {
        if n < 4 {
            return Err(ReduceError::TooFewPoints { needed: 4, got: n });
        }
        if !(self.perplexity > 0.0 && self.perplexity < n as f64) {
            return Err(ReduceError::Perplexity {
                perplexity: self.perplexity,
                n,
            });
        }
        if self.dimensions == 0 {
            return Err(ReduceError::Config("dimensions must be positive".into()));
        }
        if self.early_exaggeration_iters > self.iterations {
            return Err(ReduceError::Config(
                "early_exaggeration_iters exceeds iterations".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration > 0.0) {
            return Err(ReduceError::Config(
                "learning_rate and early_exaggeration must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TsneRun {
    pub embedding: Array2<f64>,
    /// `(iteration, KL(P‖Q))` with the un-exaggerated `P`; iteration 0 is
    /// the initial layout and the last entry is after the final step.
    pub kl_trace: Vec<(usize, f64)>,
}

pub fn tsne(e: &EmbeddingSet, cfg: &TsneConfig) -> Result<EmbeddingSet, ReduceError> {
    let (codes, data) = to_matrix(e);
    cfg.validate(codes.len())?;
    check_nonzero(&codes, &data)?;
    let dups = duplicate_groups(&codes, &data);
    if !dups.is_empty() {
        return Err(ReduceError::DuplicateVectors(dups));
    }
    let run = tsne_run(data.view(), cfg)?;
    from_matrix(
        e,
        &codes,
        &run.embedding,
        &ReductionConfig::Tsne(cfg.clone()),
    )
}

/// Pairwise `(1 - cos) / 2` distances.
pub fn input_distances(data: ArrayView2<f64>) -> Array2<f64> {
    let n = data.nrows();
    let norms = row_norms(&data.to_owned());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let cos = xi.dot(&data.row(j)) / (norms[i] * norms[j]);
                        ((1.0 - cos) / 2.0).clamp(0.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Entropy (nats) and normalized row for precision `beta` over squared
/// distances `sq` (self excluded by the caller).
fn row_distribution(sq: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, &d) in out.iter_mut().zip(sq) {
        *o = (-beta * (d - min)).exp();
        sum += *o;
    }
    let mut weighted = 0.0;
    for (o, &d) in out.iter_mut().zip(sq) {
        *o /= sum;
        weighted += *o * (d - min);
    }
    sum.ln() + beta * weighted
}

/// Row-stochastic conditional affinities (`p_{j|i}`, zero diagonal).
pub fn conditional_probabilities(
    distances: &Array2<f64>,
    perplexity: f64,
) -> Result<Array2<f64>, ReduceError> {
    let n = distances.nrows();
    if !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(ReduceError::Perplexity { perplexity, n });
    }
    let target = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sq: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| distances[[i, j]].powi(2))
                .collect();
            let mut p = vec![0.0; n - 1];
            let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
            for _ in 0..MAX_BISECTION_STEPS {
                let h = row_distribution(&sq, beta, &mut p);
                if (h.exp() - perplexity).abs() < PERPLEXITY_TOLERANCE {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_infinite() {
                        beta * 2.0
                    } else {
                        (beta + hi) / 2.0
                    };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            row_distribution(&sq, beta, &mut p);
            let mut full = Vec::with_capacity(n);
            full.extend_from_slice(&p[..i]);
            full.push(0.0);
            full.extend_from_slice(&p[i..]);
            full
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(ReduceError::NonFinite);
    }
    Ok(out)
}

/// `2^H` of a row's conditional distribution, skipping the diagonal.
pub fn row_perplexity(p: &Array2<f64>, i: usize) -> f64 {
    let h: f64 = p
        .row(i)
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.log2())
        .sum();
    2f64.powf(h)
}

/// `(P + Pᵀ) / 2N`, off-diagonal floored at [`P_FLOOR`], renormalized.
pub fn joint_probabilities(conditional: &Array2<f64>) -> Array2<f64> {
    let n = conditional.nrows();
    let mut p = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v =
                    ((conditional[[i, j]] + conditional[[j, i]]) / (2.0 * n as f64)).max(P_FLOOR);
                p[[i, j]] = v;
                sum += v;
            }
        }
    }
    p.mapv_inplace(|x| x / sum);
    p
}

/// Student-t numerators `1 / (1 + |y_i - y_j|²)` (row-major, zero diagonal)
/// and their total.
fn student_t(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, f64) {
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dims..(i + 1) * dims];
            let mut row = vec![0.0; n];
            let mut s = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                if j != i {
                    let yj = &y[j * dims..(j + 1) * dims];
                    let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                    *r = 1.0 / (1.0 + d2);
                    s += *r;
                }
            }
            (row, s)
        })
        .collect();
    let mut z = 0.0;
    let mut num = Vec::with_capacity(n * n);
    for (row, s) in rows {
        z += s;
        num.extend(row);
    }
    (num, z)
}

/// `4 Σ_j (scale·p_ij − q_ij)(y_i − y_j) / (1 + |y_i − y_j|²)`.
fn gradient_flat(p: &[f64], scale: f64, y: &[f64], n: usize, dims: usize) -> Vec<f64> {
    let (num, z) = student_t(y, n, dims);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dims..(i + 1) * dims];
            let mut g = vec![0.0; dims];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = (scale * p[i * n + j] - w / z) * w;
                let yj = &y[j * dims..(j + 1) * dims];
                for k in 0..dims {
                    g[k] += coeff * (yi[k] - yj[k]);
                }
            }
            g.iter_mut().for_each(|x| *x *= 4.0);
            g
        })
        .collect();
    rows.concat()
}

fn kl_flat(p: &[f64], y: &[f64], n: usize, dims: usize) -> f64 {
    let (num, z) = student_t(y, n, dims);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (num[i * n + j] / z).max(f64::MIN_POSITIVE);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

fn check_shapes(p: &Array2<f64>, y: &Array2<f64>) -> Result<(), ReduceError> {
    let n = y.nrows();
    if p.nrows() != n || p.ncols() != n {
        return Err(ReduceError::ShapeMismatch(format!(
            "P is {}x{}, Y has {} rows",
            p.nrows(),
            p.ncols(),
            n
        )));
    }
    Ok(())
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Gradient of `KL(P‖Q)` with respect to the output points.
pub fn tsne_gradient(p: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>, ReduceError> {
    check_shapes(p, y)?;
    let (n, d) = y.dim();
    let g = gradient_flat(&flat(p), 1.0, &flat(y), n, d);
    Ok(Array2::from_shape_vec((n, d), g).expect("shape matches"))
}

pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> Result<f64, ReduceError> {
    check_shapes(p, y)?;
    let (n, d) = y.dim();
    Ok(kl_flat(&flat(p), &flat(y), n, d))
}

/// Full optimization on raw rows (no duplicate check).
pub fn tsne_run(data: ArrayView2<f64>, cfg: &TsneConfig) -> Result<TsneRun, ReduceError> {
    let n = data.nrows();
    cfg.validate(n)?;
    let dims = cfg.dimensions;
    let distances = input_distances(data);
    let p = flat(&joint_probabilities(&conditional_probabilities(
        &distances,
        cfg.perplexity,
    )?));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tsne/init"));
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * dims];
    let mut kl_trace = vec![(0, kl_flat(&p, &y, n, dims))];

    for iter in 0..cfg.iterations {
        let exaggerating = iter < cfg.early_exaggeration_iters;
        let scale = if exaggerating {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if exaggerating {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let grad = gradient_flat(&p, scale, &y, n, dims);
        for ((u, g), yv) in update.iter_mut().zip(&grad).zip(y.iter_mut()) {
            *u = momentum * *u - cfg.learning_rate * g;
            *yv += *u;
        }
        for k in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dims + k] -= mean;
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ReduceError::NonFinite);
        }
        let done = iter + 1;
        if done % TRACE_EVERY == 0 || done == cfg.iterations {
            kl_trace.push((done, kl_flat(&p, &y, n, dims)));
        }
    }
    Ok(TsneRun {
        embedding: Array2::from_shape_vec((n, dims), y).expect("shape matches"),
        kl_trace,
    })
}
