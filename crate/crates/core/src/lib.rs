pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
