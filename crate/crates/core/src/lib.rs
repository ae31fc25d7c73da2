//! Class-incremental learning for 1-D spectral classification, with continual
//! backpropagation to counter loss of plasticity.

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod plasticity;
pub mod rng;
pub mod runner;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
