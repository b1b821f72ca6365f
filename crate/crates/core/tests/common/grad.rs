//! Finite-difference checks of the three training losses through a width-8
//! network. Each scenario returns the worst relative error over all
//! parameters.

use contracluster::cpt::ntxent_raw;
use contracluster::numerics::{
    backward_encoder, backward_projection, forward_encoder, forward_projection, Activation, GradSet, Matrix,
    NetConfig, ParamSet,
};
use contracluster::rng;
use contracluster::sft::{sft_objective, SftBatch};
use rand::Rng;

const STEP: f64 = 1e-6;

pub fn net(dropout: f64) -> ParamSet {
    let cfg = NetConfig {
        input_dim: 5,
        encoder_widths: vec![8, 8],
        encoder_output_activation: Activation::Linear,
        encoder_dropout: dropout,
        proj_hidden: 8,
        proj_dim: 4,
        cls_hidden: 8,
        classes: 3,
        head_dropout: dropout,
        ema_decay: 0.999,
    };
    ParamSet::init(&cfg, 17).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Worst `|a − n| / max(|a| + |n|, 1e-6)` over every parameter, with `n` a
/// central difference of `loss`.
pub fn worst_error(params: &ParamSet, grads: &GradSet, loss: impl Fn(&ParamSet) -> f64) -> f64 {
    let analytic: Vec<f64> = grads.slices().into_iter().flat_map(|(_, s)| s.to_vec()).collect();
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for (t, &a) in analytic.iter().enumerate() {
        let bump = |p: &mut ParamSet, delta: f64| {
            let mut k = 0;
            for (_, s) in p.live.slices_mut() {
                if t < k + s.len() {
                    s[t - k] += delta;
                    return;
                }
                k += s.len();
            }
        };
        bump(&mut p, STEP);
        let up = loss(&p);
        bump(&mut p, -2.0 * STEP);
        let down = loss(&p);
        bump(&mut p, STEP);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
    }
    worst
}

fn ntxent_end_to_end(params: &ParamSet, x: &Matrix) -> (f64, GradSet) {
    let (h, ec) = forward_encoder(params, x, true, 5).unwrap();
    let (z, pc) = forward_projection(params, &h, true, 6).unwrap();
    let (loss, gz) = ntxent_raw(&z, 0.5);
    let mut grads = params.zero_grads();
    let gh = backward_projection(params, &pc, &gz, &mut grads).unwrap();
    backward_encoder(params, &ec, &gh, &mut grads).unwrap();
    (loss, grads)
}

fn batch(proto_rows: usize, unlabeled_rows: usize) -> SftBatch {
    let weak = random(unlabeled_rows, 5, 3);
    let mut strong = weak.clone();
    strong.add_scaled(&random(unlabeled_rows, 5, 4), 0.3).unwrap();
    SftBatch {
        proto_x: random(proto_rows, 5, 2),
        proto_y: (0..proto_rows).map(|i| i % 3).collect(),
        weak_x: weak,
        strong_x: strong,
    }
}

pub fn ntxent_error(dropout: f64) -> f64 {
    let params = net(dropout);
    let x = random(6, 5, 1);
    let (_, grads) = ntxent_end_to_end(&params, &x);
    worst_error(&params, &grads, |p| ntxent_end_to_end(p, &x).0)
}

pub fn proto_error(dropout: f64) -> f64 {
    let params = net(dropout);
    let b = batch(6, 0);
    let (_, grads) = sft_objective(&params, &b, 1.0, 0.95, 9).unwrap();
    worst_error(&params, &grads, |p| sft_objective(p, &b, 1.0, 0.95, 9).unwrap().0.total)
}

/// Threshold below 1/3 keeps every row of the 3-class batch in the mask.
pub fn consistency_error(dropout: f64) -> f64 {
    let params = net(dropout);
    let b = batch(3, 8);
    let (losses, grads) = sft_objective(&params, &b, 2.0, 0.3, 9).unwrap();
    assert_eq!(losses.confident, 8);
    worst_error(&params, &grads, |p| sft_objective(p, &b, 2.0, 0.3, 9).unwrap().0.total)
}
