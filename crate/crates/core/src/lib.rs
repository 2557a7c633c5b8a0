pub mod cli;
pub mod compiler;
pub mod error;
pub mod fixtures;
pub mod scalar;
pub mod spline;
pub mod tensor;
pub mod transformer;
pub mod verifier;
pub mod veronese;

pub use error::{Error, Result};
pub use scalar::{Backend, Rational, Scalar};
pub use tensor::Mat;
