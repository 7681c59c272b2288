//! Spatio-temporal context-aware optical flow estimation.
//!
//! The crate is generic over the real scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Network code paths run in `f32`; gradient checks and
//! metric oracles use `f64`. Concrete aliases for both widths live at the
//! crate root.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod psc;
pub mod rrcu;
pub mod scalar;
pub mod selftest;
pub mod tcc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Rank-3 `[C, H, W]` activations.
pub type FeatureMap<T> = Tensor<T>;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Flow32 = flow::FlowField<f32>;
pub type Flow64 = flow::FlowField<f64>;
pub type Params32 = autodiff::ParamStore<f32>;
pub type Params64 = autodiff::ParamStore<f64>;
