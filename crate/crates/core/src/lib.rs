pub mod data;
pub mod error;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
