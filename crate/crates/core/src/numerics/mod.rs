//! Dense tensors, reverse-mode differentiation and the Adam optimizers.

pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{
    adam_step, clip_global_norm, global_norm, sparse_adam_step, AdamConfig, Moments, OptimizerMode,
    OptimizerState,
};
pub use params::{Gradients, Param, ParamGrad, ParamId, ParamKind, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
