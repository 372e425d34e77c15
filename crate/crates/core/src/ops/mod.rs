//! Differentiable primitives with explicit forward/backward pairs.

mod basic;
mod batchnorm;
mod conv;
mod optim;

pub use basic::*;
pub use batchnorm::*;
pub use conv::*;
pub use optim::*;
