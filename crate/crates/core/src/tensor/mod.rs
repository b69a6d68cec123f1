//! Dense row-major tensors and a minimal reverse-mode autodiff tape.
//!
//! Everything is generic over the element type so the same forward/backward
//! code runs in f32 for training and in f64 for finite-difference gradient
//! verification. All kernels are plain sequential loops with a fixed
//! summation order, which makes runs bit-reproducible.

mod data;
pub mod gradcheck;
pub mod ops;
mod tape;

pub use data::{lit, Scalar, Tensor};
pub use ops::{adaptive_pool_bounds, Pad};
pub use tape::{Tape, Var};
