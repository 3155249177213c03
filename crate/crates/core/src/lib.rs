//! Cross-domain image translation GAN.
//!
//! Two weight-tied encoder/generator towers, label-conditioned generation,
//! auxiliary-classifier discriminators and the random domain-pair training
//! loop. The crate is `no_std` (with `alloc`); the default `std` feature only
//! enables runtime SIMD detection in the GEMM backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
