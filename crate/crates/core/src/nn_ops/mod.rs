//! Layer primitives with forward and backward rules, recorded on a [`Tape`].
//!
//! [`Tape`]: crate::tensor::Tape

mod conv;
mod dense;
mod layers;
mod norm;
mod pool;

pub use conv::{Conv2dSpec, DwsConvSpec};
pub use layers::{BatchNorm, Builder, Conv2d, ConvBn, Ctx, DwsConv, Linear};
pub use norm::{BatchNormSpec, RunningStats};

use serde::{Deserialize, Serialize};

/// Batch-norm behaviour switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics; nothing updated.
    Eval,
}
