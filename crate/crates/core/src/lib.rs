//! Time-lag conditioned synthesis of future FLAIR volumes.
//!
//! A 3D U-Net generator receives the four source modalities of an earlier
//! examination together with a continuous time lag. The lag is expanded into
//! a spatial map by learned transposed convolutions and concatenated with
//! the generator's first feature maps. Three adversarial variants add a
//! PatchGAN discriminator: unconditioned on time, time-conditioned, or with
//! an auxiliary whole-year classifier.

pub mod autograd;
#[cfg(feature = "io")]
pub mod cli;
#[cfg(feature = "io")]
pub mod config;
pub mod data_pipeline;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod trainer;
pub mod time_conditioning;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
