//! A small reverse-mode autodiff engine over dense `f32` tensors.
//!
//! Convolutions are lowered to im2col + GEMM; everything runs on the calling
//! thread, so a forward/backward pass is bitwise reproducible.

mod checkpoint;
mod graph;
mod kernels;
mod layers;
pub mod loss;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{CustomOp, Gradients, Graph, Mode, NormIds, Var};
pub use layers::{BatchNorm, Conv2d, ConvSpec, Linear};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{he_normal, Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
