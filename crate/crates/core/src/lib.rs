//! Hybrid classical-quantum filtering and smoothing.
//!
//! A classical signal `x(t)` drives a quantum system that is continuously
//! measured. The crate estimates `x` from the measurement record, either
//! causally (filtering) or using the full record (smoothing), on a grid of
//! classical points with a Fock-space quantum block at each point. A
//! Kalman-Bucy/smoother pair covers the linear-Gaussian special case.

// `!(a > b)` is used on purpose so NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::too_many_arguments)]

pub mod classical;
pub mod cli;
pub mod backward;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod forward;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod oracle;
pub mod operators;
pub mod pipeline;
pub mod scenario;
pub mod smoother;
pub mod truth;

pub use error::{Error, Result};
