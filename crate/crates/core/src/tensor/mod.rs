//! Minimal dense tensor engine with reverse-mode differentiation and Adam.

mod adam;
mod array;
pub mod checkpoint;
mod gemm;
mod params;
mod rng;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use array::Tensor;
pub use gemm::{is_deterministic, set_deterministic};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use rng::RngStreams;
pub use scalar::Scalar;
pub use tape::{BnStats, Gradients, LossKind, Mode, Tape, Var, BN_EPS, BN_MOMENTUM};
