//! Reverse-mode differentiation for the small set of layers an
//! encoder-decoder network needs: 3×3 and transposed 4×4 convolutions,
//! batch normalization, ReLU, channel concatenation, element-wise
//! arithmetic and the mean squared error, plus SGD with momentum, a
//! polynomial learning-rate schedule, initializers and checkpoints.
//!
//! Everything is generic over [`Float`], so the same graph code trains in
//! `f32` and is verified against finite differences in `f64`.

pub mod checkpoint;
mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor, RngState};
pub use error::{Error, Result};
pub use float::Float;
pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{BnState, Graph, Mode, OpKind, Var};
pub use init::{init_he, init_normal};
pub use optim::{poly_lr, sgd_step, LrSchedule, Parameter, Sgd};
pub use tensor::{Shape, Tensor};
