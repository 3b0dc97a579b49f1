//! Desk-scale video captioning.

pub mod afs;
pub mod attention;
pub mod decoder;
pub mod encoder;
mod error;
pub mod harness;
pub mod metrics;
mod scalar;
pub mod tensor;
pub mod text;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Tape64 = tensor::Tape<f64>;
