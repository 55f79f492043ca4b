//! Core of a distance-aware human-object interaction detector: geometry,
//! a small reverse-mode autograd, far-near distance attention, the
//! diversification memory, the focal objective and HOI evaluation.
//!
//! The crate is `no_std` with `alloc`; transcendental functions go through
//! `libm` so results do not depend on the platform's math library.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod error;
pub mod eval;
pub mod fnda;
pub mod geometry;
pub mod gradcheck;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod token_post;

pub use error::{Error, Result};
pub use model::{ModelConfig, SdtModel, Toggles};
pub use tensor::Matrix;
