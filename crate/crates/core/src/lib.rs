//! Numerical core for class-conditional prompting in audio-visual
//! segmentation.
//!
//! Everything here is `no_std` + `alloc`: the array/tape engine, the audio
//! front end, the synthetic scene generator, the set-prediction model, the
//! matching losses, the class-conditional mixture bank, the prompting
//! objectives, the evaluation metrics and the training step. File formats,
//! the CLI and other IO live in the `cpm` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod audio;
pub mod ccdm;
pub mod diffcore;
mod error;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
