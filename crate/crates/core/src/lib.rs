//! Conditional flow matching over attributed 2D point clouds.
//!
//! The numeric kernels are generic over [`Scalar`]; the aliases below fix
//! them to `f64` (the default used everywhere in the pipeline) or `f32`.

pub mod error;
pub mod scalar;
pub mod data;
pub mod spatial;
pub mod tensor;
pub mod ot;
pub mod transformer;
pub mod flow;
pub mod metrics;
pub mod plot;
pub mod bench;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
