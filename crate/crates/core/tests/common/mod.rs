//! Independent scalar-loop and brute-force references shared by the oracle
//! and acceptance suites. Apart from `grad`, which differentiates the real
//! losses numerically, nothing here calls into the library's math.

#![allow(dead_code)]

pub mod grad;

use rand::Rng;

pub fn rng(seed: u64) -> contracluster::rng::Rng {
    contracluster::rng::seeded(seed)
}

pub fn random_rows(r: &mut impl Rng, n: usize, d: usize, span: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-span..span)).collect()).collect()
}

pub fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Softmax rows computed with a plain loop.
pub fn softmax(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// NT-Xent over unit rows where rows `2m` and `2m+1` are positives.
pub fn ntxent(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let sim = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let pos = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += sim(i, k).exp();
            }
        }
        total += -(sim(i, pos).exp() / denom).ln();
    }
    total / n as f64
}

/// Mean cross-entropy of probability rows against labels.
pub fn xent(q: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &t) in q.iter().zip(y) {
        s -= row[t].ln();
    }
    s / q.len() as f64
}

/// Confidence-masked consistency term with hard weak targets.
pub fn consistency(q_weak: &[Vec<f64>], q_strong: &[Vec<f64>], c: f64) -> f64 {
    let mut s = 0.0;
    for (w, st) in q_weak.iter().zip(q_strong) {
        let mut best = 0;
        for j in 1..w.len() {
            if w[j] > w[best] {
                best = j;
            }
        }
        if w[best] >= c {
            s -= st[best].ln();
        }
    }
    s / q_weak.len() as f64
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest k = 2 inertia over every bipartition with both sides non-empty.
pub fn best_bipartition_inertia(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut inertia = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|&i| ((mask >> i) & 1 == 1) == side)
                .map(|i| &points[i])
                .collect();
            let mut c = vec![0.0; d];
            for m in &members {
                for j in 0..d {
                    c[j] += m[j] / members.len() as f64;
                }
            }
            inertia += members.iter().map(|m| sq(m, &c)).sum::<f64>();
        }
        best = best.min(inertia);
    }
    best
}

/// Silhouette straight from the definition.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| sq(&points[i], &points[j]).sqrt()).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c == labels[i] {
                continue;
            }
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if other.is_empty() {
                continue;
            }
            let m = other.iter().map(|&j| sq(&points[i], &points[j]).sqrt()).sum::<f64>() / other.len() as f64;
            b = b.min(m);
        }
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Best agreement over all `k!` relabelings of the predictions.
pub fn accuracy_by_enumeration(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count())
        .max()
        .unwrap() as f64
        / pred.len() as f64
}
