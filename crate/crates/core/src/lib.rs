pub mod dataio;
pub mod detector;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
