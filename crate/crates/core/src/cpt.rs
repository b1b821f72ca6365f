//! Stage 1: contrastive pre-training of the encoder and projection head with
//! the NT-Xent loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Family};
use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::numerics::{
    backward_encoder, backward_projection, forward_encoder, forward_projection, sgd_step, Matrix,
    OptimState, ParamSet, Schedule, Sections,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(skip)]
    pub seed: u64,
}

pub(crate) fn default_temperature() -> f64 {
    0.1
}

pub(crate) fn default_momentum() -> f64 {
    0.9
}

impl CptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("cpt batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `2B` unit-norm projections; rows `2m` and `2m + 1` are the two views of
/// sample `m`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    z: Matrix,
}

impl ContrastiveBatch {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() == 0 || z.rows() % 2 != 0 {
            return Err(Error::Contract(format!(
                "contrastive batch needs an even, non-zero row count, got {}",
                z.rows()
            )));
        }
        for (i, row) in z.iter_rows().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { z })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn pairs(&self) -> usize {
        self.z.rows() / 2
    }
}

/// NT-Xent loss over a validated batch and its gradient w.r.t. the rows of `z`.
pub fn ntxent_loss(batch: &ContrastiveBatch, temperature: f64) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(ntxent_raw(&batch.z, temperature))
}

/// NT-Xent on arbitrary rows, with `sim(a, b) = a·b`. Only equal to cosine
/// similarity when rows are unit length; [`ntxent_loss`] enforces that.
///
/// Every anchor `i` contributes
/// `-s(i, pair(i))/τ + log Σ_{k≠i} exp(s(i, k)/τ)`, averaged over all rows.
pub fn ntxent_raw(z: &Matrix, temperature: f64) -> (f64, Matrix) {
    let n = z.rows();
    let sim = z.matmul_t(z).expect("square by construction");
    let mut grad = Matrix::zeros(n, z.cols());
    let mut loss = 0.0;
    let scale = 1.0 / (n as f64 * temperature);
    let mut p = vec![0.0; n];
    for i in 0..n {
        let pos = i ^ 1;
        let row = sim.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in 0..n {
            p[k] = if k == i { 0.0 } else { (row[k] / temperature - max).exp() };
            denom += p[k];
        }
        loss += -(row[pos] / temperature - max) + denom.ln();
        // d l_i / d s_ik = (p_ik - [k == pos]) / τ
        for k in 0..n {
            if k == i {
                continue;
            }
            let coef = (p[k] / denom - if k == pos { 1.0 } else { 0.0 }) * scale;
            if coef == 0.0 {
                continue;
            }
            for c in 0..z.cols() {
                grad[(i, c)] += coef * z[(k, c)];
                grad[(k, c)] += coef * z[(i, c)];
            }
        }
    }
    (loss / n as f64, grad)
}

#[derive(Clone, Debug)]
pub struct CptOutcome {
    pub params: ParamSet,
    /// Mean loss of each epoch, in order.
    pub epoch_loss: Vec<f64>,
}

/// One contrastive step on the samples `idx`; returns the batch loss.
fn cpt_step(
    view: &UnlabeledView<'_>,
    idx: &[usize],
    params: &mut ParamSet,
    opt: &mut OptimState,
    cfg: &CptConfig,
    aug: &AugmentConfig,
    step: usize,
) -> Result<f64> {
    let samples = view.samples();
    let step_seed = rng::derive(cfg.seed, 0x1000 + step as u64);
    let mut rows = Vec::with_capacity(2 * idx.len() * samples.cols());
    for (m, &s) in idx.iter().enumerate() {
        for v in 0..2u64 {
            let seed = rng::derive(step_seed, 2 * m as u64 + v);
            rows.extend(augment::transform(samples.row(s), Family::Contrastive, aug, seed));
        }
    }
    let x = Matrix::from_vec(2 * idx.len(), samples.cols(), rows)?;
    let (h, enc_cache) = forward_encoder(params, &x, true, rng::derive(step_seed, u64::MAX))?;
    let (z, proj_cache) = forward_projection(params, &h, true, rng::derive(step_seed, u64::MAX - 1))?;
    let (loss, grad_z) = ntxent_raw(&z, cfg.temperature);
    let mut grads = params.zero_grads();
    let grad_h = backward_projection(params, &proj_cache, &grad_z, &mut grads)?;
    backward_encoder(params, &enc_cache, &grad_h, &mut grads)?;
    sgd_step(params, &grads, opt, step)?;
    Ok(loss)
}

/// Trains `f` and `g` for `cfg.epochs` epochs. Each epoch shuffles the data
/// and drops the last partial batch.
pub fn run_cpt(
    view: &UnlabeledView<'_>,
    mut params: ParamSet,
    cfg: &CptConfig,
    aug: &AugmentConfig,
) -> Result<CptOutcome> {
    cfg.validate()?;
    aug.validate_for_dim(view.dim())?;
    if view.is_empty() {
        return Err(Error::Config("cannot pre-train on an empty dataset".into()));
    }
    if cfg.batch_size > view.len() {
        return Err(Error::Config(format!(
            "cpt batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            view.len()
        )));
    }
    if view.dim() != params.live.input_dim() {
        return Err(Error::dim("run_cpt", params.live.input_dim(), view.dim()));
    }
    let mut opt = OptimState::new(&params, cfg.learning_rate, cfg.momentum, Schedule::Constant)?;
    opt.trainable = Sections {
        encoder: true,
        proj_head: true,
        cls_head: false,
    };
    let mut order: Vec<usize> = (0..view.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::derive(cfg.seed, 7));
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks_exact(cfg.batch_size) {
            total += cpt_step(view, idx, &mut params, &mut opt, cfg, aug, step)?;
            step += 1;
            batches += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    Ok(CptOutcome { params, epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::net::l2_normalize_rows;

    fn unit_rows(rows: &[Vec<f64>]) -> Matrix {
        l2_normalize_rows(&Matrix::from_rows(rows).unwrap()).0
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let b = ContrastiveBatch::new(unit_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]])).unwrap();
        let (loss, grad) = ntxent_loss(&b, 0.1).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.as_slice().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn identical_rows_give_ln_three() {
        let b = ContrastiveBatch::new(unit_rows(&vec![vec![0.3, -0.4, 1.2]; 4])).unwrap();
        let (loss, _) = ntxent_loss(&b, 0.5).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_axis_pairs_closed_form() {
        let b = ContrastiveBatch::new(unit_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]))
        .unwrap();
        let (loss, _) = ntxent_loss(&b, 1.0).unwrap();
        let expected = (1.0 + 2.0 * (-1f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.55144).abs() < 1e-5);
    }

    #[test]
    fn contract_violations() {
        let odd = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(ContrastiveBatch::new(odd).is_err());
        let not_unit = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ContrastiveBatch::new(not_unit), Err(Error::Contract(_))));
        let b = ContrastiveBatch::new(unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert!(ntxent_loss(&b, 0.0).is_err());
    }
}
