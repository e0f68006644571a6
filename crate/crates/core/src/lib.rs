pub mod autograd;
pub mod batch;
pub mod bundle;
pub mod config;
pub mod container;
pub mod dataset;
pub mod degradation;
pub mod diffusion;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod image;
pub mod kernelgen;
mod kernels;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use tensor::Tensor;
