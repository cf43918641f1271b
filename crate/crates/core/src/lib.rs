//! Simulation of correlated dephasing in a system–ancilla pair and of its
//! cancellation through a dark ancilla state.
//!
//! The numerical core is generic over the real scalar type (`f32` or `f64`);
//! the aliases at the crate root fix it to `f64`, which is what the
//! experiment drivers use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod fit;
pub mod lindblad;
pub mod matrixcore;
pub mod noise;
pub mod scalar;
pub mod spinops;
pub mod trajectories;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use matrixcore::ComplexDense;
pub use scalar::Scalar;

/// Double-precision complex number.
pub type C64 = num_complex::Complex<f64>;
/// Double-precision dense complex matrix.
pub type CMatrix = ComplexDense<f64>;
