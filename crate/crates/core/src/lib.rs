pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod metadata;
pub mod model;
pub mod moe;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type MoeMae32 = model::MoeMae<f32>;
pub type MoeMae64 = model::MoeMae<f64>;
