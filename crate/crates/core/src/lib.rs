//! Texture expansion by self-similarity-driven transposed convolution.
//!
//! The crate is organised bottom-up: [`tensor`] kernels, reverse-mode
//! differentiation in [`autodiff`], the similarity and expansion operators in
//! [`selfsim`] and [`expansion`], the network in [`generator`], and the
//! training and evaluation machinery on top.

pub mod autodiff;
pub mod error;
pub mod expansion;
pub mod generator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod selfsim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use generator::{GeneratorConfig, GeneratorMode, GeneratorWeights};
pub use params::NamedTensors;
pub use tensor::{ConvSpec, DType, Dims, PaddingMode, Scalar, Tensor};
