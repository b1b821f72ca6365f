use crate::error::{Error, Result};
use crate::numerics::matrix::squared_distance;
use crate::numerics::Matrix;

use super::kmeans::ClusterModel;

/// Selected prototypes with their cluster ids as pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub indices: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    /// Requested number of prototypes.
    pub n_total: usize,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-cluster prototype quotas summing to `min(n_proto, n)`.
///
/// Each cluster starts with `floor(n_proto / k)`; the remainder goes one by
/// one to the largest clusters (ties: lower id). Quotas are capped at the
/// cluster size and any shortfall is handed out in the same order to
/// clusters with spare members.
pub fn quotas(sizes: &[usize], n_proto: usize) -> Vec<usize> {
    let k = sizes.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut q = vec![n_proto / k; k];
    for &c in order.iter().take(n_proto % k) {
        q[c] += 1;
    }
    for c in 0..k {
        q[c] = q[c].min(sizes[c]);
    }
    let target = n_proto.min(sizes.iter().sum());
    let mut missing = target - q.iter().sum::<usize>();
    while missing > 0 {
        for &c in &order {
            if missing > 0 && q[c] < sizes[c] {
                q[c] += 1;
                missing -= 1;
            }
        }
    }
    q
}

/// Takes the members closest to each centroid (distance in `z`, ties by
/// sample index) up to the cluster's quota. Output is grouped by cluster id,
/// nearest first.
pub fn sample_prototypes(z: &Matrix, model: &ClusterModel, n_proto: usize) -> Result<PrototypeSet> {
    let k = model.k();
    if n_proto < k {
        return Err(Error::Config(format!("n_proto {n_proto} is smaller than k_part {k}")));
    }
    if model.assignments.len() != z.rows() {
        return Err(Error::dim("sample_prototypes", z.rows(), model.assignments.len()));
    }
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for (i, &c) in model.assignments.iter().enumerate() {
        members[c].push((squared_distance(z.row(i), model.centroids.row(c)), i));
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let q = quotas(&sizes, n_proto);
    let mut indices = Vec::new();
    let mut pseudo_labels = Vec::new();
    for (c, mut m) in members.into_iter().enumerate() {
        m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in m.iter().take(q[c]) {
            indices.push(i);
            pseudo_labels.push(c);
        }
    }
    Ok(PrototypeSet {
        indices,
        pseudo_labels,
        n_total: n_proto,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_members_of_one_dimensional_cluster() {
        // one cluster at 0 plus a far cluster so k = 2
        let z = Matrix::from_vec(6, 1, vec![-3.0, -1.0, 2.0, 5.0, 100.0, 101.0]).unwrap();
        let model = ClusterModel {
            centroids: Matrix::from_vec(2, 1, vec![0.0, 100.5]).unwrap(),
            assignments: vec![0, 0, 0, 0, 1, 1],
            inertia: 0.0,
        };
        let p = sample_prototypes(&z, &model, 4).unwrap();
        assert_eq!(&p.indices[..2], &[1, 2]);
        assert_eq!(&p.pseudo_labels[..2], &[0, 0]);
    }

    #[test]
    fn quota_rules() {
        assert_eq!(quotas(&[25, 25, 25, 25], 100), vec![25; 4]);
        // remainder to the largest clusters first, ties to the lower id
        assert_eq!(quotas(&[10, 30, 30, 20], 6), vec![1, 2, 2, 1]);
        // capped clusters hand their share to others
        assert_eq!(quotas(&[1, 50, 50], 9), vec![1, 4, 4]);
        assert_eq!(quotas(&[2, 3, 4], 9), vec![2, 3, 4]);
        assert_eq!(quotas(&[2, 3, 4], 20), vec![2, 3, 4]);
    }

    #[test]
    fn too_few_prototypes() {
        let z = Matrix::zeros(3, 1);
        let model = ClusterModel {
            centroids: Matrix::zeros(2, 1),
            assignments: vec![0, 1, 1],
            inertia: 0.0,
        };
        assert!(sample_prototypes(&z, &model, 1).is_err());
    }
}
