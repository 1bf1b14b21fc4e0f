//! Core numerics for an attribute-based spatiotemporal masked-autoencoder
//! land-surface model.
//!
//! Everything here is pure computation over 64-bit floats: a reverse-mode
//! autodiff tape, the embedding / group-masking / encoder / decoder stack,
//! fine-tuning heads, a differentiable bucket hydrology backbone, and the
//! evaluation metric suite. IO, file formats, and the CLI live in the
//! companion `stefaland` crate.
//!
//! The crate is `no_std` + `alloc`; all float math goes through [`math`].

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bucket;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod groups;
pub mod heads;
pub mod masking;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
