use crate::error::{Error, Result};
use crate::numerics::matrix::euclidean;
use crate::numerics::Matrix;
use crate::par;

/// Mean silhouette coefficient under Euclidean distance.
///
/// For each sample, `a` is the mean distance to the other members of its
/// cluster and `b` the smallest mean distance to another cluster;
/// `s = (b − a) / max(a, b)`. Members of singleton clusters score 0.
pub fn silhouette(z: &Matrix, assignments: &[usize]) -> Result<f64> {
    if assignments.len() != z.rows() {
        return Err(Error::dim("silhouette", z.rows(), assignments.len()));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(Error::Contract(format!(
            "silhouette needs at least 2 non-empty clusters, got {present}"
        )));
    }
    let scores = par::map_indices(z.rows(), |i| {
        let own = assignments[i];
        if sizes[own] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for (j, row) in z.iter_rows().enumerate() {
            if j != i {
                sums[assignments[j]] += euclidean(z.row(i), row);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            (b - a) / denom
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tight_pairs() {
        let z = Matrix::from_vec(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let s = silhouette(&z, &[0, 0, 1, 1]).unwrap();
        let expected = (9.95 / 10.05 + 9.85 / 9.95) / 2.0;
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.99).abs() < 1e-5);
    }

    #[test]
    fn singletons_score_zero() {
        let z = Matrix::from_vec(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(silhouette(&z, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let z = Matrix::from_vec(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        assert!(silhouette(&z, &[1, 1, 1]).is_err());
    }
}
