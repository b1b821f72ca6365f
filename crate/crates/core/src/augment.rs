//! Stochastic transformation families used by the training stages.
//!
//! Vector mode:
//! - contrastive: Gaussian jitter, then coordinate dropout
//! - weak: small Gaussian jitter
//! - strong: jitter, coordinate dropout, then a per-sample uniform scale
//!
//! Tiny-image mode treats a sample as a flattened square grayscale image:
//! - weak: integer shift (zero fill) and a coin-flip horizontal mirror
//! - strong: weak, then a square cutout and pixel noise
//! - contrastive: weak, then jitter and coordinate dropout
//!
//! Random draws follow a fixed order so a transform can be replayed from its
//! seed: per-coordinate normals first, then the dropout shuffle, then the scale.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Vector,
    TinyImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Contrastive,
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub jitter_sigma_contrastive: f64,
    pub jitter_sigma_weak: f64,
    pub jitter_sigma_strong: f64,
    pub dropout_frac_contrastive: f64,
    pub dropout_frac_strong: f64,
    pub scale_range_strong: (f64, f64),
    pub shift_max: usize,
    pub cutout_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Vector,
            jitter_sigma_contrastive: 0.1,
            jitter_sigma_weak: 0.05,
            jitter_sigma_strong: 0.15,
            dropout_frac_contrastive: 0.2,
            dropout_frac_strong: 0.25,
            scale_range_strong: (0.8, 1.2),
            shift_max: 2,
            cutout_size: 4,
        }
    }
}

impl AugmentConfig {
    /// Every family returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            mode: AugmentMode::Vector,
            jitter_sigma_contrastive: 0.0,
            jitter_sigma_weak: 0.0,
            jitter_sigma_strong: 0.0,
            dropout_frac_contrastive: 0.0,
            dropout_frac_strong: 0.0,
            scale_range_strong: (1.0, 1.0),
            shift_max: 0,
            cutout_size: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.jitter_sigma_contrastive,
            self.jitter_sigma_weak,
            self.jitter_sigma_strong,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("jitter sigmas must be finite and >= 0".into()));
        }
        for f in [self.dropout_frac_contrastive, self.dropout_frac_strong] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("dropout fraction {f} outside [0, 1)")));
            }
        }
        let (lo, hi) = self.scale_range_strong;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) needs 0 < lo <= hi")));
        }
        Ok(())
    }

    /// Checks that samples of width `dim` can be transformed in this mode.
    pub fn validate_for_dim(&self, dim: usize) -> Result<()> {
        self.validate()?;
        if self.mode == AugmentMode::TinyImage && image_side(dim).is_none() {
            return Err(Error::Config(format!(
                "tiny_image mode needs a square sample width, got {dim}"
            )));
        }
        Ok(())
    }
}

fn image_side(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s * s == dim && s > 0).then_some(s)
}

/// Applies one random transformation of `family` to `x`. Deterministic in
/// `(x, family, cfg, seed)`; output has the same width as `x`.
///
/// Tiny-image mode expects a square width (see [`AugmentConfig::validate_for_dim`]);
/// other widths fall back to vector mode.
pub fn transform(x: &[f64], family: Family, cfg: &AugmentConfig, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    match (cfg.mode, image_side(x.len())) {
        (AugmentMode::TinyImage, Some(side)) => tiny_image(x, side, family, cfg, &mut rng),
        _ => vector(x, family, cfg, &mut rng),
    }
}

fn vector(x: &[f64], family: Family, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    match family {
        Family::Contrastive => {
            jitter(&mut out, cfg.jitter_sigma_contrastive, rng);
            coordinate_dropout(&mut out, cfg.dropout_frac_contrastive, rng);
        }
        Family::Weak => jitter(&mut out, cfg.jitter_sigma_weak, rng),
        Family::Strong => {
            jitter(&mut out, cfg.jitter_sigma_strong, rng);
            coordinate_dropout(&mut out, cfg.dropout_frac_strong, rng);
            let (lo, hi) = cfg.scale_range_strong;
            let s = rng.random_range(lo..=hi);
            out.iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

fn tiny_image(x: &[f64], side: usize, family: Family, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = shift_flip(x, side, cfg.shift_max, rng);
    match family {
        Family::Weak => {}
        Family::Strong => {
            cutout(&mut out, side, cfg.cutout_size, rng);
            jitter(&mut out, cfg.jitter_sigma_strong, rng);
        }
        Family::Contrastive => {
            jitter(&mut out, cfg.jitter_sigma_contrastive, rng);
            coordinate_dropout(&mut out, cfg.dropout_frac_contrastive, rng);
        }
    }
    out
}

/// Adds `sigma · N(0, 1)` to every coordinate; always draws one normal per
/// coordinate so the stream layout does not depend on `sigma`.
fn jitter(v: &mut [f64], sigma: f64, rng: &mut Rng) {
    for x in v.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *x += sigma * n;
    }
}

/// Zeroes exactly `floor(frac · len)` coordinates: the first entries of a
/// seeded shuffle of `0..len`.
fn coordinate_dropout(v: &mut [f64], frac: f64, rng: &mut Rng) {
    let count = (frac * v.len() as f64).floor() as usize;
    if count == 0 {
        return;
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.shuffle(rng);
    for &i in &idx[..count] {
        v[i] = 0.0;
    }
}

fn shift_flip(x: &[f64], side: usize, shift_max: usize, rng: &mut Rng) -> Vec<f64> {
    let m = shift_max as i64;
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    let flip = rng.random_bool(0.5);
    let s = side as i64;
    let mut out = vec![0.0; x.len()];
    for r in 0..s {
        for c in 0..s {
            let src_r = r - dy;
            let mut src_c = c - dx;
            if flip {
                src_c = s - 1 - src_c;
            }
            if (0..s).contains(&src_r) && (0..s).contains(&src_c) {
                out[(r * s + c) as usize] = x[(src_r * s + src_c) as usize];
            }
        }
    }
    out
}

fn cutout(v: &mut [f64], side: usize, size: usize, rng: &mut Rng) {
    let size = size.min(side);
    if size == 0 {
        return;
    }
    let r0 = rng.random_range(0..=side - size);
    let c0 = rng.random_range(0..=side - size);
    for r in r0..r0 + size {
        for c in c0..c0 + size {
            v[r * side + c] = 0.0;
        }
    }
}
