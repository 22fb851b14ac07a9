//! IntrinsicNet and the two-stage RetiNet: architectures, losses, training
//! and inference on top of the `intrinsic-autodiff` engine.

pub mod config;
pub mod data;
mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod network;
pub mod train;
pub mod verify;

pub use config::{GradientMode, IntrinsicNetConfig, LossWeights, RetiNetConfig, SkipMode, Stage2Config, TrainConfig};
pub use error::{Error, Result};
pub use network::{IntrinsicNet, Stage2Net};
pub use model::{Architecture, Model, ModelKind, ModelSpec, SavedModel};
pub use train::{TrainLog, Trainer};
