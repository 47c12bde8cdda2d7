//! Reverse-mode automatic differentiation over `ndarray` values.
//!
//! The tape records a small, fixed vocabulary of dense operations (matrix
//! products, convolutions over `[H, W, C]` maps, normalizations, bilinear
//! resampling, softmax) and is generic over `f32`/`f64` so the same graph can
//! be re-run in double precision for finite-difference checks.

pub mod kernels;
mod params;
mod scalar;
mod tape;

pub use params::{Binding, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

/// Rows whose L2 norm falls below this are treated as direction-free.
pub const NORM_FLOOR: f64 = 1e-8;
