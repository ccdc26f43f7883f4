//! Continual cross-modal unified representation learning on a shared discrete codebook.
//!
//! The crate trains successive pairs of synthetic modalities into one
//! vector-quantized code space. Each stage pairs a fixed mediator modality
//! with a new partner; the codebook expands between stages, a frozen teacher
//! snapshot drives pseudo-modality replay, a mixture-of-experts adapter maps
//! per-modality features into the shared space, and an EWC penalty anchors
//! the adapter to its previous-stage values.
//!
//! The crate is `no_std` + `alloc`: everything here is deterministic pure
//! computation over `f64` matrices. File formats, configuration, and the
//! command-line interface live in the companion `comet-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod ewc;
pub mod gradcheck;
pub mod mat;
pub(crate) mod math;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod pmr;
pub mod quantizer;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{CoreError, Result};
pub use mat::Mat;
pub use params::ParamSet;
