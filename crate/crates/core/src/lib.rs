pub mod error;
pub mod graph;
pub mod nn;
pub mod oracles;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
