//! Tensors, neural primitives and gradient machinery shared by every model.

mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod params;
mod prng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{ChamferMode, Grads, Graph, MixPlan, PatchGeom, Var, SMOOTH_L1_BETA};
pub use ops::{avg_pool_tokens, bilinear_upsample, conv3x3, gelu, instance_norm, mlp_apply, softmax};
pub use params::{
    init_params, Conv3x3Params, InitScheme, InstanceNormLayer, Linear, LinearParams, ParamId,
    ParamSet,
};
pub use prng::Prng;
pub use tensor::Tensor;
