use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax (max-shifted).
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::dim("targets", rows, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::OutOfRange {
            what: "target class",
            value: t,
            bound: classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against class indices, with the
/// gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    check_targets(targets, logits.rows(), logits.cols())?;
    let n = logits.rows();
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        grad[(i, t)] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_target_gives_zero_loss() {
        let logits = Matrix::from_vec(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn uniform_ten_classes_is_ln10() {
        let logits = Matrix::zeros(3, 10);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let logits = Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let targets = [2, 0];
        let (_, grad) = softmax_xent(&logits, &targets).unwrap();
        let eps = 1e-6;
        for k in 0..6 {
            let mut p = logits.clone();
            p.as_mut_slice()[k] += eps;
            let mut m = logits.clone();
            m.as_mut_slice()[k] -= eps;
            let fd = (softmax_xent(&p, &targets).unwrap().0 - softmax_xent(&m, &targets).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad.as_slice()[k]).abs() < 1e-8, "entry {k}: {fd} vs {}", grad.as_slice()[k]);
        }
    }

    #[test]
    fn target_out_of_range_errors() {
        assert!(matches!(
            softmax_xent(&Matrix::zeros(1, 3), &[3]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Matrix::from_vec(2, 4, vec![1e3, -1e3, 0.0, 5.0, -2.0, -2.0, -2.0, -2.0]).unwrap();
        let s = softmax_rows(&l);
        for row in s.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
