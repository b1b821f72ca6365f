//! SGD with momentum and EMA shadow weights.

use serde::{Deserialize, Serialize};

use super::net::{GradSet, ParamSet, Sections, Weights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// `lr · cos(7π·step / (16·total_steps))`
    Cosine { total_steps: usize },
}

impl Schedule {
    pub fn learning_rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { total_steps } => {
                let total = total_steps.max(1) as f64;
                base * (7.0 * std::f64::consts::PI * step as f64 / (16.0 * total)).cos()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub trainable: Sections,
    velocity: Weights,
}

impl OptimState {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64, schedule: Schedule) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay: 0.0,
            schedule,
            trainable: Sections::ALL,
            velocity: params.live.zeros_like(),
        })
    }

    pub fn velocity(&self) -> &Weights {
        &self.velocity
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − η(step)·v` over the trainable sections.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, opt: &mut OptimState, step: usize) -> Result<()> {
    if !params.live.same_shape(grads) || !params.live.same_shape(&opt.velocity) {
        return Err(Error::dim("sgd_step", "gradient shaped like parameters", "mismatch"));
    }
    let lr = opt.schedule.learning_rate(opt.learning_rate, step);
    let (mu, wd, trainable) = (opt.momentum, opt.weight_decay, opt.trainable);
    let g = grads.slices();
    let v = opt.velocity.slices_mut();
    let p = params.live.slices_mut();
    for (((sec, p), (_, g)), (_, v)) in p.into_iter().zip(g).zip(v) {
        if !trainable.contains(sec) {
            continue;
        }
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live` for every tensor.
pub fn ema_update(params: &mut ParamSet) {
    let d = params.ema_decay;
    let live = params.live.slices();
    for ((_, s), (_, l)) in params.ema_shadow.slices_mut().into_iter().zip(live) {
        for (si, &li) in s.iter_mut().zip(l) {
            *si = d * *si + (1.0 - d) * li;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::net::{Activation, NetConfig};

    fn params(decay: f64) -> ParamSet {
        ParamSet::init(
            &NetConfig {
                input_dim: 2,
                encoder_widths: vec![3],
                encoder_output_activation: Activation::Linear,
                encoder_dropout: 0.0,
                proj_hidden: 2,
                proj_dim: 2,
                cls_hidden: 2,
                classes: 2,
                head_dropout: 0.0,
                ema_decay: decay,
            },
            7,
        )
        .unwrap()
    }

    fn fill(w: &mut Weights, v: f64) {
        for (_, s) in w.slices_mut() {
            s.iter_mut().for_each(|x| *x = v);
        }
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = params(0.9);
        let before = p.live.clone();
        let mut g = p.zero_grads();
        fill(&mut g, 0.25);
        let mut opt = OptimState::new(&p, 1.0, 0.0, Schedule::Constant).unwrap();
        sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        for ((_, a), (_, b)) in p.live.slices().iter().zip(before.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((y - x - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params(0.9);
        let before = p.live.clone();
        let g = p.zero_grads();
        let mut opt = OptimState::new(&p, 0.5, 0.0, Schedule::Constant).unwrap();
        sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        assert_eq!(p.live, before);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut p = params(0.9);
        fill(&mut p.live, 1.0);
        let mut g = p.zero_grads();
        fill(&mut g, 0.5);
        let mut opt = OptimState::new(&p, 0.1, 0.9, Schedule::Constant).unwrap();
        sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        sgd_step(&mut p, &g, &mut opt, 1).unwrap();
        // v1 = 0.5, p1 = 1 - 0.05; v2 = 0.9·0.5 + 0.5 = 0.95, p2 = p1 - 0.095
        let expected = 1.0 - 0.1 * 0.5 - 0.1 * (0.9 * 0.5 + 0.5);
        for (_, s) in p.live.slices() {
            assert!(s.iter().all(|&x| (x - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn frozen_sections_are_untouched() {
        let mut p = params(0.9);
        let before = p.live.clone();
        let mut g = p.zero_grads();
        fill(&mut g, 1.0);
        let mut opt = OptimState::new(&p, 0.1, 0.0, Schedule::Constant).unwrap();
        opt.weight_decay = 0.1;
        opt.trainable.proj_head = false;
        sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        assert_eq!(p.live.proj_head, before.proj_head);
        assert_ne!(p.live.encoder, before.encoder);
    }

    #[test]
    fn cosine_schedule_values() {
        let s = Schedule::Cosine { total_steps: 16 };
        assert_eq!(s.learning_rate(0.03, 0), 0.03);
        let end = s.learning_rate(0.03, 16);
        assert!((end - 0.03 * (7.0 * std::f64::consts::PI / 16.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn ema_limits_and_analytic_step() {
        let mut p = params(1.0);
        let shadow = p.ema_shadow.clone();
        fill(&mut p.live, 3.0);
        ema_update(&mut p);
        assert_eq!(p.ema_shadow, shadow);

        p.ema_decay = 0.0;
        ema_update(&mut p);
        assert_eq!(p.ema_shadow, p.live);

        p.ema_decay = 0.999;
        fill(&mut p.ema_shadow, 0.0);
        fill(&mut p.live, 1.0);
        ema_update(&mut p);
        for (_, s) in p.ema_shadow.slices() {
            assert!(s.iter().all(|&x| (x - 0.001).abs() < 1e-15));
        }
    }
}
