//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! `f32` is the working precision; every operation is generic over [`Scalar`]
//! so the same graph code can be re-run in `f64` by the gradient checker.

mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod param;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{Differentiable, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use param::{Bound, Gradients, ParamSet, Parameter};
pub use rng::SplitMix64;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
