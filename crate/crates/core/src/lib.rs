pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod lrp;
pub mod nn;
pub mod rac;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
