//! De-noising toolkit core for photoacoustic microscopy (PAM) images.
//!
//! The crate is self-contained and `no_std` (alloc only): a deterministic
//! f64 tensor kernel with tape-based reverse-mode differentiation, the
//! attention-augmented U-Net generator and CNN discriminator built on it,
//! the three-component A-line noise model used to synthesize training
//! pairs, the scheduled composite loss, Adam, and the PSNR/SSIM/SNR/CNR
//! quality metrics. File formats, the CLI, and training orchestration
//! live in the companion `pamdn` crate.
//!
//! Everything is seeded and single-threaded by construction, so identical
//! inputs produce bit-identical outputs across runs and platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{BnStats, Tape, TensorId};
pub use tensor::Tensor;
