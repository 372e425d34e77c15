//! Convolution kernels adjusted per input instance, for generalizing to unseen image domains.
//!
//! Convolutional networks whose middle convolutions carry a per-instance
//! kernel `Θs + Σ λ_n(x) V_n`, trained with cross-domain mixing and
//! evaluated leave-one-domain-out.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod io;
pub mod ops;
pub mod network;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::Param;
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
