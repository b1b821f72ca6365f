//! Unsupervised classification in three stages: contrastive pre-training of
//! an encoder, prototype sampling from k-means on a reduced embedding, and
//! semi-supervised fine-tuning with the prototypes as noisy labels.

pub mod augment;
pub mod cps;
pub mod cpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
mod par;
pub mod pipeline;
pub mod rng;
pub mod sft;

pub use error::{Error, Result};
