pub mod anonymizer;
pub mod autograd;
pub mod dataset;
pub mod error;
pub mod evaluation;
mod kernels;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
