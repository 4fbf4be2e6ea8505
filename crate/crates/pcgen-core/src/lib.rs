//! Core algorithms for single-image 3D object reconstruction.
//!
//! Everything in this crate is pure computation: a dense f32 tensor engine
//! with reverse-mode autodiff, pinhole camera geometry, a differentiable
//! point-cloud renderer, the training losses and evaluation metrics, and the
//! transformer structure generator that maps one RGB image to eight
//! depth/mask views. File formats, datasets, the training loop, and the CLI
//! live in the companion `pcgen` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature only
//! adds `std::error::Error` impls.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod error;
pub mod geometry;
pub mod loss;
pub mod math;
pub mod model;
pub mod optim;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod tnsr;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
