//! Unified descriptor-form models of gas, water and power networks, a
//! semi-implicit Euler integrator, and tangential IRKA model reduction.

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dae;
pub mod error;
pub mod gas;
pub mod integrator;
pub mod linalg;
pub mod mor;
pub mod power;
pub mod water;

pub use dae::{make_dae, LinearPart, Nonlinearity, SharedNonlinearity, UnifiedDae};
pub use error::{Error, Result};
