//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Convolutions are cross-correlations. Every forward op checks its output
//! for NaN/Inf and fails with [`TensorError::NonFinite`] instead of
//! propagating it.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use conv::{ConvSpec, PadMode};
pub use error::{Result, TensorError};
pub use nn::{Conv2d, Ctx, Init, Linear};
pub use optim::Adam;
pub use params::ParamStore;
pub use tape::{concat, Gradients, LinearMap, Tape, Var};
pub use tensor::Tensor;
