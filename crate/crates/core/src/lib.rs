//! Feature-product networks.
//!
//! A small CPU deep-learning stack built around the FP-block: a 1x1
//! expansion, two parallel depthwise filters whose responses are multiplied
//! per pixel, an affine-free batch norm and a 1x1 recombination. The crate
//! provides
//!
//! - [`tensor`]: dense tensors, parameters and a reverse-mode tape,
//! - [`nn_ops`]: convolution, depthwise convolution, batch norm, pooling and loss,
//! - [`fp_block`]: the FP-block, its single-filter ablation, the Volterra view
//!   of the filter pair and the closed-form parameter count,
//! - [`model_zoo`]: CIFAR ResNet-20/32/44, binary layer-substitution configs
//!   and the ImageNet FP-ResNet-50 used for parameter accounting,
//! - [`data`]: CIFAR-10 binary loading, augmentation and batching,
//! - [`trainer`]: SGD with momentum, the step learning-rate schedule,
//!   metrics and checkpoints,
//! - [`verify`]: self-checks shared by the command-line `verify` suites.

// Range checks are written as `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fp_block;
pub mod model_zoo;
pub mod nn_ops;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use fp_block::{count_fp_block_params, FpBlock, FpBlockSpec, VolterraKernel};
pub use model_zoo::{Base, Model, ModelSpec, ModelSummary};
pub use nn_ops::Mode;
pub use tensor::{DType, Fill, ParamStore, Scalar, Shape, Tape, Tensor, Var};
