//! Instance-conditioned convolution: a static kernel plus a coefficient-weighted
//! combination of kernel templates, coefficients produced by a meta-adjuster.

mod adjuster;
mod layer;
mod templates;

pub use adjuster::*;
pub use layer::*;
pub use templates::*;
