//! Clustering metrics: Hungarian-matched accuracy, NMI, purity, confusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nmi: f64,
    /// Largest class fraction inside each predicted cluster (0 when empty).
    pub purity: Vec<f64>,
    /// `confusion[p][t]` counts samples predicted `p` with true class `t`.
    pub confusion: Vec<Vec<usize>>,
    /// `matching[p]` is the true class matched to predicted cluster `p`.
    pub matching: Vec<usize>,
}

fn check(pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim("label vectors", pred.len(), truth.len()));
    }
    for (what, ids) in [("predicted id", pred), ("true id", truth)] {
        if let Some(&v) = ids.iter().find(|&&v| v >= k) {
            return Err(Error::OutOfRange { what, value: v, bound: k });
        }
    }
    Ok(())
}

/// `k x k` table of (predicted, true) co-occurrence counts.
pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check(pred, truth, k)?;
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect matching on a square cost matrix by the
/// shortest-augmenting-path method with row/column potentials, O(k³).
/// Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_row[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            assignment[col_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Accuracy under the one-to-one cluster→class matching that maximizes
/// agreement.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<(f64, Vec<usize>)> {
    let table = confusion(pred, truth, k)?;
    let matching = best_matching(&table);
    let n = pred.len();
    let agree: usize = matching.iter().enumerate().map(|(p, &t)| table[p][t]).sum();
    let acc = if n == 0 { 0.0 } else { agree as f64 / n as f64 };
    Ok((acc, matching))
}

fn best_matching(table: &[Vec<usize>]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = table
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    min_cost_assignment(&cost)
}

/// Normalized mutual information `I(P;T) / sqrt(H(P)·H(T))`, natural logs.
/// Zero when either partition has zero entropy.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("nmi", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Contract("nmi of empty partitions".into()));
    }
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        joint[p][t] += 1;
    }
    let n = pred.len() as f64;
    let row: Vec<f64> = joint.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col: Vec<f64> = (0..kt).map(|t| joint.iter().map(|r| r[t]).sum::<usize>() as f64).collect();
    let entropy = |m: &[f64]| -> f64 {
        m.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let (hp, ht) = (entropy(&row), entropy(&col));
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (p, r) in joint.iter().enumerate() {
        for (t, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row[p] * col[t])).ln();
            }
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

/// Fraction of prototypes whose pseudo-label, mapped through `matching`
/// (cluster → class), equals the prototype's true class.
pub fn prototype_accuracy(pseudo_labels: &[usize], truth: &[usize], matching: &[usize]) -> Result<f64> {
    if pseudo_labels.len() != truth.len() {
        return Err(Error::dim("prototype_accuracy", pseudo_labels.len(), truth.len()));
    }
    if pseudo_labels.is_empty() {
        return Err(Error::Contract("no prototypes to score".into()));
    }
    let mut hits = 0;
    for (&p, &t) in pseudo_labels.iter().zip(truth) {
        let mapped = *matching.get(p).ok_or(Error::OutOfRange {
            what: "pseudo-label",
            value: p,
            bound: matching.len(),
        })?;
        hits += usize::from(mapped == t);
    }
    Ok(hits as f64 / pseudo_labels.len() as f64)
}

pub fn report(pred: &[usize], truth: &[usize], k: usize) -> Result<MetricsReport> {
    let confusion = confusion(pred, truth, k)?;
    let (accuracy, matching) = hungarian_accuracy(pred, truth, k)?;
    let nmi = if pred.is_empty() { 0.0 } else { nmi(pred, truth)? };
    let purity = confusion
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                *row.iter().max().expect("k > 0") as f64 / total as f64
            }
        })
        .collect();
    Ok(MetricsReport {
        accuracy,
        nmi,
        purity,
        confusion,
        matching,
    })
}
