//! Learned per-token layer skipping for decoder-only Transformer language models.

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod router;
pub mod scalar;
pub mod selftest;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
