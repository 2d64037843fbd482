//! Numerical kernels behind the recorded operations. Each kernel is a plain
//! function over [`crate::tensor::Tensor`] values; the tape composes them.

pub mod conv;
pub mod dense;
pub mod elem;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{same_padding, ConvGeom};
pub use norm::{BnMode, RunningStats};
