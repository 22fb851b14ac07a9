//! Intrinsic image primitives.
//!
//! Linear-light rasters and their intrinsic components (reflectance, shading,
//! specular highlights, illuminant), the image formation equations that tie
//! them together, evaluation metrics, a classical Retinex baseline, and a
//! procedural generator whose ground truth satisfies the formation equations
//! by construction.

pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod retinex;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use image::{
    compose_diffuse, compose_specular, compose_with_light, concat_channels, derive_shading,
    gradient, to_display, GradientField, Illuminant, Image, IntrinsicSet,
    DEFAULT_SHADING_EPSILON,
};
