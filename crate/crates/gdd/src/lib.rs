//! Training-free guided image fusion.
//!
//! A decoder network is optimized from scratch against a single image pair:
//! the observed low-quality input and a structurally aligned guidance image.
//! No training data is involved; the network architecture itself acts as the
//! regularizer, and attention gates driven by the guidance image steer the
//! reconstruction. The same engine covers hyperspectral super-resolution,
//! pansharpening, and guided denoising.
//!
//! Typical flow: build a [`runner::FusionProblem`] from tensors, build a
//! model with [`network::GddModel::build`] (or pick a comparison variant),
//! then run [`runner::optimize`] and export or score the result.

pub mod autodiff;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{GddError, Result};
pub use network::{GddModel, NetworkConfig, Variant};
pub use runner::{optimize, FusionProblem, RunConfig, Task};
pub use tensor::{Shape, Tensor};
