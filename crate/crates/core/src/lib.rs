//! Adversarially robust super-resolution: an RRDB generator trained with
//! relativistic GAN losses, hardened by PGD attacks started from structured
//! noise, plus the data pipeline and metrics around it.

pub mod attack;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
