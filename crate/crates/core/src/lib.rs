//! Construction and analysis of pre-activation residual networks.
//!
//! The crate has four layers:
//!
//! * a dense f64 tensor engine with tape-based reverse-mode differentiation
//!   ([`tensor`], [`tape`], [`ops`]);
//! * an architecture layer that parses the `input-n1-...-n7` naming grammar,
//!   materializes the network family and computes structural statistics
//!   ([`arch`]);
//! * analysis tools: unravelled-ensemble expansion, gradient decomposition,
//!   effective-depth truncation and path-length gradient profiling
//!   ([`unravel`], [`profile`]);
//! * the dense-prediction rewrite and a small training/evaluation harness
//!   ([`seg`], [`harness`]).

pub mod arch;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod ops;
pub mod parallel;
pub mod profile;
pub mod seg;
pub mod tape;
pub mod tensor;
pub mod unravel;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
