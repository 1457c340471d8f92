//! Space-time high-order finite elements and the modified ALG2 splitting for
//! mean-field control and generalized optimal transport of reaction-diffusion
//! systems.

pub mod error;
pub mod grid;
pub mod alg2;
pub mod model;
pub mod pointwise;
pub mod quadrature;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
