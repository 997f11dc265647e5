pub mod autodiff;
pub mod decay;
pub mod error;
pub mod model;
pub mod gradcheck;
pub mod reference;
pub mod rope;
pub mod scalar;
pub mod sda;
pub mod tensor;

pub use autodiff::{Counters, CustomOp, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
