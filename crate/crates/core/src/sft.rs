//! Stage 3: prototype-based semi-supervised fine-tuning.
//!
//! Each step combines cross-entropy on a batch of weakly augmented
//! prototypes (labels = cluster ids) with a confidence-masked consistency
//! term: the hard prediction on a weak view of an unlabeled sample is the
//! target for its strong view. Only `f` and `c` train; an EMA of the weights
//! is updated after every step.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Family};
use crate::cps::PrototypeSet;
use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::numerics::loss::check_targets;
use crate::numerics::{
    argmax, backward_classifier, backward_encoder, ema_update, forward_classifier, forward_encoder,
    sgd_step, softmax_rows, softmax_xent, GradSet, Matrix, Mode, OptimState, ParamSet, Schedule,
    Sections,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub batch_size: usize,
    #[serde(default = "default_mu")]
    pub unlabeled_ratio: usize,
    #[serde(default = "default_lambda")]
    pub unlabeled_weight: f64,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "crate::cpt::default_momentum")]
    pub momentum: f64,
    /// L2 weight decay; no value is prescribed, so it defaults to 0.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub cosine_schedule: bool,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    /// Steps per epoch; defaults to `max(1, n / (μ·B))`.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(skip)]
    pub seed: u64,
}

fn default_mu() -> usize {
    7
}

fn default_lambda() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    0.95
}

fn default_true() -> bool {
    true
}

fn default_ema_decay() -> f64 {
    0.999
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.unlabeled_ratio == 0 {
            return Err(Error::Config("sft batch_size and unlabeled_ratio must be >= 1".into()));
        }
        if !(self.unlabeled_weight >= 0.0) {
            return Err(Error::Config("unlabeled_weight must be >= 0".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence_threshold must lie in (0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.unlabeled_ratio * self.batch_size
    }
}

/// Mean cross-entropy of probability rows `q` against pseudo-labels, with
/// the gradient w.r.t. the logits that produced `q`.
pub fn proto_loss(q: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_targets(labels, q.rows(), q.cols())?;
    let n = q.rows().max(1) as f64;
    let mut grad = q.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= q[(i, y)].max(f64::MIN_POSITIVE).ln();
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Class probabilities of the weak and strong views of an unlabeled batch.
#[derive(Clone, Debug)]
pub struct UnlabeledBatchOutput {
    pub q_weak: Matrix,
    pub q_strong: Matrix,
    pub hard_targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl UnlabeledBatchOutput {
    pub fn from_probabilities(q_weak: Matrix, q_strong: Matrix, threshold: f64) -> Result<Self> {
        if q_weak.shape() != q_strong.shape() {
            return Err(Error::dim(
                "UnlabeledBatchOutput",
                format!("{:?}", q_weak.shape()),
                format!("{:?}", q_strong.shape()),
            ));
        }
        let hard_targets: Vec<usize> = q_weak.iter_rows().map(argmax).collect();
        let mask = q_weak
            .iter_rows()
            .zip(&hard_targets)
            .map(|(row, &t)| row[t] >= threshold)
            .collect();
        Ok(Self {
            q_weak,
            q_strong,
            hard_targets,
            mask,
        })
    }

    pub fn from_logits(weak_logits: &Matrix, strong_logits: &Matrix, threshold: f64) -> Result<Self> {
        Self::from_probabilities(softmax_rows(weak_logits), softmax_rows(strong_logits), threshold)
    }

    pub fn confident(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `(1/μB) Σ m_i · H(q̂_i^w, q_i^s)` and its gradient w.r.t. the strong
/// logits. The weak branch is a constant target.
pub fn consistency_loss(out: &UnlabeledBatchOutput) -> (f64, Matrix) {
    let n = out.q_strong.rows();
    let mut grad = Matrix::zeros(n, out.q_strong.cols());
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..n {
        if !out.mask[i] {
            continue;
        }
        let t = out.hard_targets[i];
        loss -= out.q_strong[(i, t)].max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(i);
        g.copy_from_slice(out.q_strong.row(i));
        g[t] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    (loss / n as f64, grad)
}

/// Inputs of one fine-tuning step, already augmented.
#[derive(Clone, Debug)]
pub struct SftBatch {
    pub proto_x: Matrix,
    pub proto_y: Vec<usize>,
    pub weak_x: Matrix,
    pub strong_x: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftLosses {
    pub proto: f64,
    pub consistency: f64,
    pub total: f64,
    pub confident: usize,
}

/// Loss of one step and its gradient w.r.t. every parameter.
///
/// Prototype and strong branches run in training mode with dropout seeded
/// from `seed`; the weak branch runs in eval mode and only supplies targets.
pub fn sft_objective(
    params: &ParamSet,
    batch: &SftBatch,
    unlabeled_weight: f64,
    threshold: f64,
    seed: u64,
) -> Result<(SftLosses, GradSet)> {
    let mut grads = params.zero_grads();

    let (hp, enc_p) = forward_encoder(params, &batch.proto_x, true, rng::derive(seed, 1))?;
    let (lp, cls_p) = forward_classifier(params, &hp, true, rng::derive(seed, 2))?;
    let (proto, g_lp) = softmax_xent(&lp, &batch.proto_y)?;
    let g_hp = backward_classifier(params, &cls_p, &g_lp, &mut grads)?;
    backward_encoder(params, &enc_p, &g_hp, &mut grads)?;

    let (consistency, confident) = if batch.weak_x.rows() > 0 {
        let (hw, _) = params.live.forward_encoder(&params.spec, &batch.weak_x, Mode::Eval)?;
        let (lw, _) = params.live.forward_classifier(&params.spec, &hw, Mode::Eval)?;
        let (hs, enc_s) = forward_encoder(params, &batch.strong_x, true, rng::derive(seed, 3))?;
        let (ls, cls_s) = forward_classifier(params, &hs, true, rng::derive(seed, 4))?;
        let out = UnlabeledBatchOutput::from_logits(&lw, &ls, threshold)?;
        let (consistency, mut g_ls) = consistency_loss(&out);
        if unlabeled_weight != 0.0 && out.confident() > 0 {
            g_ls.scale(unlabeled_weight);
            let g_hs = backward_classifier(params, &cls_s, &g_ls, &mut grads)?;
            backward_encoder(params, &enc_s, &g_hs, &mut grads)?;
        }
        (consistency, out.confident())
    } else {
        (0.0, 0)
    };
    Ok((
        SftLosses {
            proto,
            consistency,
            total: proto + unlabeled_weight * consistency,
            confident,
        },
        grads,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub proto_loss: f64,
    pub consi_loss: f64,
    pub total: f64,
    /// Fraction of unlabeled samples that passed the confidence mask.
    pub mask_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub params: ParamSet,
    pub trace: Vec<SftEpoch>,
}

fn augment_rows(samples: &Matrix, idx: &[usize], family: Family, aug: &AugmentConfig, seed: u64) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * samples.cols());
    for (m, &i) in idx.iter().enumerate() {
        data.extend(augment::transform(samples.row(i), family, aug, rng::derive(seed, m as u64)));
    }
    Matrix::from_vec(idx.len(), samples.cols(), data)
}

/// Fine-tunes `f` and a freshly initialized `c` on prototypes plus
/// unlabeled data.
pub fn run_sft(
    view: &UnlabeledView<'_>,
    protos: &PrototypeSet,
    mut params: ParamSet,
    cfg: &SftConfig,
    aug: &AugmentConfig,
) -> Result<SftOutcome> {
    cfg.validate()?;
    aug.validate_for_dim(view.dim())?;
    if protos.is_empty() {
        return Err(Error::Config("prototype set is empty".into()));
    }
    if view.is_empty() {
        return Err(Error::Config("cannot fine-tune on an empty dataset".into()));
    }
    if let Some(&i) = protos.indices.iter().find(|&&i| i >= view.len()) {
        return Err(Error::OutOfRange {
            what: "prototype index",
            value: i,
            bound: view.len(),
        });
    }
    check_targets(&protos.pseudo_labels, protos.len(), params.live.classes())?;

    params.reinit_cls_head(rng::derive(cfg.seed, 11));
    params.ema_decay = cfg.ema_decay;
    params.reset_ema();

    let n = view.len();
    let ub = cfg.unlabeled_batch();
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or((n / ub).max(1));
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = if cfg.cosine_schedule {
        Schedule::Cosine { total_steps }
    } else {
        Schedule::Constant
    };
    let mut opt = OptimState::new(&params, cfg.learning_rate, cfg.momentum, schedule)?;
    opt.weight_decay = cfg.weight_decay;
    opt.trainable = Sections {
        encoder: true,
        proj_head: false,
        cls_head: true,
    };

    let samples = view.samples();
    let proto_pos: Vec<usize> = (0..protos.len()).collect();
    let mut r = rng::seeded(rng::derive(cfg.seed, 12));
    let mut stream: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut acc = SftEpoch {
            proto_loss: 0.0,
            consi_loss: 0.0,
            total: 0.0,
            mask_rate: 0.0,
        };
        for _ in 0..steps_per_epoch {
            let picks: Vec<usize> = if protos.len() >= cfg.batch_size {
                proto_pos.choose_multiple(&mut r, cfg.batch_size).copied().collect()
            } else {
                (0..cfg.batch_size).map(|_| r.random_range(0..protos.len())).collect()
            };
            let proto_idx: Vec<usize> = picks.iter().map(|&p| protos.indices[p]).collect();
            let proto_y: Vec<usize> = picks.iter().map(|&p| protos.pseudo_labels[p]).collect();
            while stream.len() < ub {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut r);
                stream.extend(perm);
            }
            let unl: Vec<usize> = stream.drain(..ub).collect();

            let step_seed = rng::derive(cfg.seed, 0x2000 + step as u64);
            let batch = SftBatch {
                proto_x: augment_rows(samples, &proto_idx, Family::Weak, aug, rng::derive(step_seed, 1))?,
                proto_y,
                weak_x: augment_rows(samples, &unl, Family::Weak, aug, rng::derive(step_seed, 2))?,
                strong_x: augment_rows(samples, &unl, Family::Strong, aug, rng::derive(step_seed, 3))?,
            };
            let (losses, grads) = sft_objective(
                &params,
                &batch,
                cfg.unlabeled_weight,
                cfg.confidence_threshold,
                rng::derive(step_seed, 4),
            )?;
            sgd_step(&mut params, &grads, &mut opt, step)?;
            ema_update(&mut params);
            acc.proto_loss += losses.proto;
            acc.consi_loss += losses.consistency;
            acc.total += losses.total;
            acc.mask_rate += losses.confident as f64 / ub as f64;
            step += 1;
        }
        let s = steps_per_epoch as f64;
        trace.push(SftEpoch {
            proto_loss: acc.proto_loss / s,
            consi_loss: acc.consi_loss / s,
            total: acc.total / s,
            mask_rate: acc.mask_rate / s,
        });
    }
    Ok(SftOutcome { params, trace })
}

/// Arg-max class of the eval-mode classifier for every sample (ties: lowest
/// class index).
pub fn predict(view: &UnlabeledView<'_>, params: &ParamSet, use_ema: bool) -> Result<Vec<usize>> {
    let weights = if use_ema { &params.ema_shadow } else { &params.live };
    let (h, _) = weights.forward_encoder(&params.spec, view.samples(), Mode::Eval)?;
    let (logits, _) = weights.forward_classifier(&params.spec, &h, Mode::Eval)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_probabilities_have_zero_loss() {
        let q = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(proto_loss(&q, &[1, 0]).unwrap().0, 0.0);
    }

    #[test]
    fn uniform_ten_classes() {
        let q = Matrix::filled(4, 10, 0.1);
        let (l, _) = proto_loss(&q, &[0, 3, 5, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(proto_loss(&Matrix::filled(1, 3, 1.0 / 3.0), &[3]).is_err());
    }

    #[test]
    fn fully_masked_batch() {
        let weak = Matrix::filled(3, 4, 0.25);
        let strong = Matrix::from_rows(&vec![vec![0.7, 0.1, 0.1, 0.1]; 3]).unwrap();
        let out = UnlabeledBatchOutput::from_probabilities(weak, strong, 0.95).unwrap();
        let (l, g) = consistency_loss(&out);
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_row_matching_strong_is_free() {
        let weak = Matrix::from_rows(&[vec![0.01, 0.01, 0.98]]).unwrap();
        let strong = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let out = UnlabeledBatchOutput::from_probabilities(weak, strong, 0.95).unwrap();
        assert_eq!(out.hard_targets, vec![2]);
        assert_eq!(consistency_loss(&out).0, 0.0);
    }

    #[test]
    fn one_unmasked_row_of_two() {
        let weak = Matrix::from_rows(&[vec![0.96, 0.02, 0.01, 0.01], vec![0.40, 0.30, 0.20, 0.10]]).unwrap();
        let strong = Matrix::from_rows(&[vec![0.25; 4], vec![0.9, 0.05, 0.03, 0.02]]).unwrap();
        let out = UnlabeledBatchOutput::from_probabilities(weak, strong, 0.95).unwrap();
        assert_eq!(out.mask, vec![true, false]);
        let (l, g) = consistency_loss(&out);
        assert!((l - 4f64.ln() / 2.0).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 1e-4);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }
}
