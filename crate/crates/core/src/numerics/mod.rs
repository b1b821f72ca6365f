//! Dense matrices, the small MLPs used by every stage, losses, SGD and EMA.

pub mod checkpoint;
pub mod loss;
pub mod matrix;
pub mod net;
pub mod optim;

pub use loss::{argmax, softmax_rows, softmax_xent};
pub use matrix::Matrix;
pub use net::{
    backward_classifier, backward_encoder, backward_projection, forward_classifier,
    forward_encoder, forward_projection, Activation, GradSet, LayerParams, MlpCache, Mode,
    NetConfig, NetSpec, ParamSet, ProjCache, Section, Sections, Weights,
};
pub use optim::{ema_update, sgd_step, OptimState, Schedule};
