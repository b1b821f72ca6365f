//! Dimensionality reduction behind one interface: spectral embedding of a
//! kNN graph, exact t-SNE, PCA, and identity truncation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, squared_distance};
use crate::numerics::Matrix;
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrMethod {
    Spectral,
    ExactTsne,
    Pca,
    Identity,
}

impl DrMethod {
    pub fn name(self) -> &'static str {
        match self {
            DrMethod::Spectral => "spectral",
            DrMethod::ExactTsne => "exact_tsne",
            DrMethod::Pca => "pca",
            DrMethod::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Correlation,
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Correlation => "correlation",
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => squared_distance(a, b).sqrt(),
            Metric::Cosine => cosine_distance(a, b),
            Metric::Correlation => {
                let ma = a.iter().sum::<f64>() / a.len().max(1) as f64;
                let mb = b.iter().sum::<f64>() / b.len().max(1) as f64;
                let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
                let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
                cosine_distance(&ca, &cb)
            }
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot(a, b) / (na * nb)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrConfig {
    pub method: DrMethod,
    #[serde(default = "default_neighbors")]
    pub n_neighbors: usize,
    pub out_dim: usize,
    /// Carried for configuration compatibility; none of the built-in
    /// methods uses it.
    #[serde(default)]
    pub min_dist: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(skip)]
    pub seed: u64,
}

fn default_neighbors() -> usize {
    15
}

fn default_metric() -> Metric {
    Metric::Euclidean
}

impl DrConfig {
    pub fn new(method: DrMethod, n_neighbors: usize, out_dim: usize, metric: Metric) -> Self {
        Self {
            method,
            n_neighbors,
            out_dim,
            min_dist: 0.0,
            metric,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::Config(format!("n_neighbors must be >= 2, got {}", self.n_neighbors)));
        }
        if self.out_dim == 0 {
            return Err(Error::Config("out_dim must be >= 1".into()));
        }
        if !(self.min_dist >= 0.0) {
            return Err(Error::Config("min_dist must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reduces `h` (n x d) to `n x out_dim`.
pub fn reduce(h: &Matrix, cfg: &DrConfig) -> Result<Matrix> {
    cfg.validate()?;
    match cfg.method {
        DrMethod::Identity => Ok(h.leading_columns(cfg.out_dim)),
        DrMethod::Pca => pca(h, cfg.out_dim),
        DrMethod::Spectral => spectral(h, cfg),
        DrMethod::ExactTsne => exact_tsne(h, cfg, &TsneSchedule::default()),
    }
}

/// Makes the first clearly nonzero entry of every column positive.
pub(crate) fn fix_column_signs(m: &mut Matrix) {
    for c in 0..m.cols() {
        let scale = (0..m.rows()).map(|r| m[(r, c)].abs()).fold(0.0, f64::max);
        let first = (0..m.rows()).find(|&r| m[(r, c)].abs() > 1e-9 * scale);
        if let Some(r) = first {
            if m[(r, c)] < 0.0 {
                for r in 0..m.rows() {
                    m[(r, c)] = -m[(r, c)];
                }
            }
        }
    }
}

fn pca(h: &Matrix, out_dim: usize) -> Result<Matrix> {
    let (n, d) = h.shape();
    if out_dim >= d {
        return Err(Error::Config(format!(
            "pca needs out_dim < input width, got {out_dim} >= {d}"
        )));
    }
    let means: Vec<f64> = h.column_sums().into_iter().map(|s| s / n.max(1) as f64).collect();
    let mut centered = h.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let cov = centered.t_matmul(&centered)?;
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Matrix::zeros(d, out_dim);
    for (c, &e) in order.iter().take(out_dim).enumerate() {
        for r in 0..d {
            basis[(r, c)] = eig.eigenvectors[(r, e)];
        }
    }
    let mut z = centered.matmul(&basis)?;
    fix_column_signs(&mut z);
    Ok(z)
}

/// Indices of the `k` nearest other rows of every row under `metric`
/// (ties by index).
pub fn knn(h: &Matrix, k: usize, metric: Metric) -> Vec<Vec<usize>> {
    let n = h.rows();
    par::map_indices(n, |i| {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (metric.distance(h.row(i), h.row(j)), j))
            .collect();
        let k = k.min(d.len());
        if k < d.len() {
            d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
        }
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, j)| j).collect()
    })
}

/// Symmetrized binary kNN adjacency as neighbor lists (sorted).
pub fn knn_graph(h: &Matrix, k: usize, metric: Metric) -> Vec<Vec<usize>> {
    let n = h.rows();
    let mut adj = vec![Vec::new(); n];
    for (i, nb) in knn(h, k, metric).into_iter().enumerate() {
        for j in nb {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

pub fn connected_components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    count
}

/// Laplacian eigenmap: eigenvectors of the normalized Laplacian
/// `I − D^{-1/2} A D^{-1/2}` for the `out_dim` smallest eigenvalues after the
/// trivial `D^{1/2}·1` direction.
///
/// The trivial direction is deflated (shifted above the spectrum) rather
/// than skipped by index, so a graph with up to `out_dim + 1` components
/// still gets one separating coordinate per extra component. More
/// components than that cannot be represented and are an error.
fn spectral(h: &Matrix, cfg: &DrConfig) -> Result<Matrix> {
    let n = h.rows();
    if n < cfg.n_neighbors + 1 {
        return Err(Error::Config(format!(
            "spectral embedding needs more than n_neighbors = {} samples, got {n}",
            cfg.n_neighbors
        )));
    }
    if cfg.out_dim >= n {
        return Err(Error::Config(format!("out_dim {} must be < n = {n}", cfg.out_dim)));
    }
    let adj = knn_graph(h, cfg.n_neighbors, cfg.metric);
    let components = connected_components(&adj);
    if components > cfg.out_dim + 1 {
        return Err(Error::DisconnectedGraph {
            components,
            out_dim: cfg.out_dim,
        });
    }
    let inv_sqrt: Vec<f64> = adj.iter().map(|a| 1.0 / (a.len() as f64).sqrt()).collect();
    let vol: f64 = adj.iter().map(|a| a.len() as f64).sum();
    let trivial: Vec<f64> = adj.iter().map(|a| (a.len() as f64 / vol).sqrt()).collect();
    // every eigenvalue of L lies in [0, 2]
    const SHIFT: f64 = 3.0;
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            lap[(i, j)] = SHIFT * trivial[i] * trivial[j];
        }
        lap[(i, i)] += 1.0;
        for &j in &adj[i] {
            lap[(i, j)] -= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let eig = SymmetricEigen::try_new(lap, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen(format!("no convergence ({components} components)")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut z = Matrix::zeros(n, cfg.out_dim);
    for (c, &e) in order.iter().take(cfg.out_dim).enumerate() {
        for r in 0..n {
            z[(r, c)] = eig.eigenvectors[(r, e)];
        }
    }
    fix_column_signs(&mut z);
    Ok(z)
}

/// Optimizer settings for exact t-SNE.
#[derive(Clone, Debug)]
pub struct TsneSchedule {
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
}

impl Default for TsneSchedule {
    fn default() -> Self {
        Self {
            iterations: 500,
            exaggeration: 12.0,
            exaggeration_iters: 100,
            learning_rate: 200.0,
        }
    }
}

/// Exact O(n²) t-SNE with perplexity `min(n_neighbors, (n − 1)/3)`.
pub fn exact_tsne(h: &Matrix, cfg: &DrConfig, sched: &TsneSchedule) -> Result<Matrix> {
    let n = h.rows();
    if n < 4 {
        return Err(Error::Config(format!("exact_tsne needs at least 4 samples, got {n}")));
    }
    let perplexity = (cfg.n_neighbors as f64).min((n - 1) as f64 / 3.0);
    let d2: Vec<Vec<f64>> = par::map_indices(n, |i| {
        (0..n)
            .map(|j| cfg.metric.distance(h.row(i), h.row(j)).powi(2))
            .collect()
    });
    let cond: Vec<Vec<f64>> = par::map_indices(n, |i| conditional_row(&d2[i], i, perplexity));
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let dim = cfg.out_dim;
    let mut r = rng::seeded(cfg.seed);
    let mut y: Vec<f64> = (0..n * dim)
        .map(|_| 1e-2 * r.sample::<f64, _>(StandardNormal))
        .collect();
    let mut update = vec![0.0f64; n * dim];
    let mut gains = vec![1.0f64; n * dim];
    for it in 0..sched.iterations {
        let exag = if it < sched.exaggeration_iters { sched.exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let kernel: Vec<Vec<f64>> = par::map_indices(n, |i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        1.0 / (1.0 + squared_distance(&y[i * dim..(i + 1) * dim], &y[j * dim..(j + 1) * dim]))
                    }
                })
                .collect()
        });
        let z: f64 = kernel.iter().map(|row| row.iter().sum::<f64>()).sum();
        let grad: Vec<Vec<f64>> = par::map_indices(n, |i| {
            let mut g = vec![0.0; dim];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = kernel[i][j];
                let coef = 4.0 * (exag * p[i * n + j] - w / z) * w;
                for c in 0..dim {
                    g[c] += coef * (y[i * dim + c] - y[j * dim + c]);
                }
            }
            g
        });
        for i in 0..n {
            for c in 0..dim {
                let k = i * dim + c;
                let g = grad[i][c];
                gains[k] = if (g > 0.0) != (update[k] > 0.0) {
                    gains[k] + 0.2
                } else {
                    (gains[k] * 0.8).max(0.01)
                };
                update[k] = momentum * update[k] - sched.learning_rate * gains[k] * g;
                y[k] += update[k];
            }
        }
        for c in 0..dim {
            let mean = (0..n).map(|i| y[i * dim + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dim + c] -= mean;
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("t-SNE diverged".into()));
    }
    Matrix::from_vec(n, dim, y)
}

/// Gaussian conditional probabilities of row `i` with the bandwidth found by
/// bisection to match `perplexity`.
fn conditional_row(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let mut probs = vec![0.0; d2.len()];
    for _ in 0..100 {
        let min = d2
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, &d) in d2.iter().enumerate() {
            probs[j] = if j == i { 0.0 } else { (-(d - min) * beta).exp() };
            sum += probs[j];
        }
        let mut h = 0.0;
        for (j, p) in probs.iter_mut().enumerate() {
            *p /= sum;
            if j != i && *p > 0.0 {
                h -= *p * p.ln();
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> Matrix {
        let mut r = rng::seeded(4);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let c = if i < 10 { -5.0 } else { 5.0 };
                vec![c + 0.3 * r.sample::<f64, _>(StandardNormal), 0.3 * r.sample::<f64, _>(StandardNormal)]
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn identity_passthrough() {
        let h = two_blobs();
        let z = reduce(&h, &DrConfig::new(DrMethod::Identity, 2, 2, Metric::Euclidean)).unwrap();
        assert_eq!(z, h);
    }

    #[test]
    fn pca_is_isometric_on_its_span() {
        let mut r = rng::seeded(1);
        // points in a random 2-plane of R^5
        let basis: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..5).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
                (0..5).map(|j| a * basis[0][j] + b * basis[1][j] + 1.0).collect()
            })
            .collect();
        let h = Matrix::from_rows(&rows).unwrap();
        let z = reduce(&h, &DrConfig::new(DrMethod::Pca, 2, 2, Metric::Euclidean)).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let a = squared_distance(h.row(i), h.row(j)).sqrt();
                let b = squared_distance(z.row(i), z.row(j)).sqrt();
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        assert!(reduce(&h, &DrConfig::new(DrMethod::Pca, 2, 5, Metric::Euclidean)).is_err());
    }

    #[test]
    fn spectral_separates_two_blobs_by_sign() {
        let h = two_blobs();
        let z = reduce(&h, &DrConfig::new(DrMethod::Spectral, 3, 1, Metric::Euclidean)).unwrap();
        let left: Vec<f64> = (0..10).map(|i| z[(i, 0)]).collect();
        let right: Vec<f64> = (10..20).map(|i| z[(i, 0)]).collect();
        let sl = left[0].signum();
        assert!(left.iter().all(|v| v.signum() == sl && v.abs() > 1e-6));
        assert!(right.iter().all(|v| v.signum() == -sl && v.abs() > 1e-6));
    }

    #[test]
    fn spectral_reports_too_many_components() {
        let mut rows = Vec::new();
        for c in 0..4 {
            for i in 0..6 {
                rows.push(vec![100.0 * c as f64 + i as f64 * 0.1, 0.0]);
            }
        }
        let h = Matrix::from_rows(&rows).unwrap();
        match reduce(&h, &DrConfig::new(DrMethod::Spectral, 2, 1, Metric::Euclidean)) {
            Err(Error::DisconnectedGraph { components, .. }) => assert_eq!(components, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics() {
        assert!((Metric::Euclidean.distance(&[0.0, 0.0], &[3.0, 4.0]) - 5.0).abs() < 1e-15);
        assert!(Metric::Cosine.distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
        assert!((Metric::Cosine.distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        // correlation ignores offset and scale
        assert!(Metric::Correlation.distance(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).abs() < 1e-12);
        assert!((Metric::Correlation.distance(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tsne_separates_blobs() {
        let h = two_blobs();
        let cfg = DrConfig {
            seed: 3,
            ..DrConfig::new(DrMethod::ExactTsne, 5, 2, Metric::Euclidean)
        };
        let z = reduce(&h, &cfg).unwrap();
        let mean = |range: std::ops::Range<usize>| {
            let c = range.len() as f64;
            let (mut x, mut y) = (0.0, 0.0);
            for i in range {
                x += z[(i, 0)];
                y += z[(i, 1)];
            }
            (x / c, y / c)
        };
        let (a, b) = (mean(0..10), mean(10..20));
        let between = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let within = (0..10)
            .map(|i| ((z[(i, 0)] - a.0).powi(2) + (z[(i, 1)] - a.1).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(between > 2.0 * within, "between {between} within {within}");
    }
}
