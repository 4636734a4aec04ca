//! Teacher-student semi-supervised training with spatial and temporal
//! relation-structure consistency.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: dense tensors with a define-by-run reverse-mode tape, the
//! student/teacher network, Gram relation matrices, relation graphs and their
//! stable sub-structures, the training loop, synthetic data and evaluation
//! metrics. File formats, configuration and the command-line harness live in
//! the `stsc` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod relation;
pub mod rng;
pub mod temporal;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
