//! Learned sparse measurement matrices for block compressed sensing.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece:
//! tensors and convolution, the constrained sampling layer, the
//! reconstruction network, the training step and schedule, an l1/DCT
//! iterative solver, and image quality metrics. File formats, image IO and
//! the command line live in the `dsmm` crate.
#![no_std]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod recon;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use sampling::{MeasurementMatrix, Provenance, SamplingLayerState};
pub use tensor::Tensor;
