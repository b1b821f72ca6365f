//! k-means with k-means++ seeding and best-of-restarts Lloyd iterations.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::matrix::squared_distance;
use crate::numerics::Matrix;
use crate::{par, rng};

pub const MAX_ITERATIONS: usize = 300;
pub const REL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(z: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    z.iter_rows().map(|x| nearest(x, centroids)).unzip()
}

/// k-means++ seeding.
pub fn kmeans_pp(z: &Matrix, k: usize, seed: u64) -> Matrix {
    let n = z.rows();
    let mut r = rng::seeded(seed);
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = z.iter_rows().map(|x| squared_distance(x, z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = r.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a center already
            r.random_range(0..n)
        };
        chosen.push(next);
        for (i, x) in z.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, z.row(next)));
        }
    }
    z.select_rows(&chosen)
}

/// Lloyd iterations from explicit initial centroids. Returns the model and
/// the inertia after every assignment step.
pub fn lloyd(z: &Matrix, init: Matrix) -> (ClusterModel, Vec<f64>) {
    let k = init.rows();
    let d = z.cols();
    let mut centroids = init;
    let (mut assignments, mut dist) = assign(z, &centroids);
    let mut inertia: f64 = dist.iter().sum();
    let mut history = vec![inertia];
    for _ in 0..MAX_ITERATIONS {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (x, &a) in z.iter_rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut taken = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (cv, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *cv = s / counts[c] as f64;
                }
            } else {
                // reseed with the point farthest from its centroid
                let far = (0..z.rows())
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken.push(i);
                    centroids.row_mut(c).copy_from_slice(z.row(i));
                }
            }
        }
        let (a, dd) = assign(z, &centroids);
        assignments = a;
        dist = dd;
        let next: f64 = dist.iter().sum();
        history.push(next);
        let converged = inertia - next <= REL_TOLERANCE * inertia;
        inertia = next;
        if converged && taken.is_empty() {
            break;
        }
    }
    (
        ClusterModel {
            centroids,
            assignments,
            inertia,
        },
        history,
    )
}

/// Best of `restarts` seeded runs by inertia (ties: earliest restart).
pub fn kmeans(z: &Matrix, k_part: usize, restarts: usize, seed: u64) -> Result<ClusterModel> {
    let n = z.rows();
    if k_part == 0 {
        return Err(Error::Config("k_part must be >= 1".into()));
    }
    if k_part > n {
        return Err(Error::Config(format!("k_part {k_part} exceeds sample count {n}")));
    }
    let runs = par::map_indices(restarts.max(1), |r| {
        let init = kmeans_pp(z, k_part, rng::derive(seed, r as u64));
        lloyd(z, init).0
    });
    Ok(runs
        .into_iter()
        .reduce(|best, m| if m.inertia < best.inertia { m } else { best })
        .expect("at least one restart"))
}
