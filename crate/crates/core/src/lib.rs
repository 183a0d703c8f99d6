//! Core of a lesion-focused longitudinal prediction GAN.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: the reverse-mode tensor engine, 3D layers, the four compared
//! generator/discriminator stacks, Grad-CAM attention supervision, losses,
//! Adam, the synthetic phantom cohort, patching, metrics and the training
//! step. File formats and the command line live in the `dgagan` crate.
//!
//! ## Crate features
//!
//! - `std` (default) - lets the matrix kernels detect SIMD support at run time.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod direct;
pub mod attention;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
mod kernels;
pub mod math;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod phantom;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
