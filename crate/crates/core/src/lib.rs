pub mod error;
pub mod geometry;
pub mod linalg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
pub mod data;
pub mod distill;
pub mod eval;
pub mod gradsuite;
pub mod ktn;
pub mod nn;
pub mod pipeline;
pub mod source_cnn;
pub mod sphconv;
