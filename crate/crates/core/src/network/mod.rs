//! The per-level super-resolution network and its weight files.
//!
//! Every level owns three step networks. Step `t` sees the low-resolution
//! image (plus, in factorized models, the block pixels coded by earlier
//! steps), adds the feature map of step `t − 1` and, for step 1, the
//! upsampled feature of the next coarser level, then runs residual blocks
//! and a dilated mixture head producing `12·K` channels per block.

mod graph;
mod model;
mod tensor;
mod weights;

pub use graph::{Eval, Graph, LEAKY_SLOPE};
pub use model::{
    forward_step, level_forward, step_input, upsample, Architecture, Conv, ConvId, ConvSpec, LevelLayout,
    LevelPass, Model, ModelConfig, ParamPlane, StepLayout, HEAD_DILATIONS, STEPS, STEP_POSITIONS,
};
pub use tensor::{
    conv2d, conv2d_backward, crop, leaky_relu, leaky_relu_backward, pixel_shuffle, pixel_unshuffle, uncrop,
    Real, Tensor,
};
pub use weights::{hash64, NamedTensor, WeightStore};
