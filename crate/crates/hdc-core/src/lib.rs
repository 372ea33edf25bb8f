//! Semi-supervised segmentation with hierarchical distillation and consistency.
//!
//! The crate is organized around a small tape-based reverse-mode autodiff
//! engine ([`tape`]), the kernel/eigenvalue machinery behind matrix-based
//! Renyi entropies ([`linalg`], [`entropy`]), the four training objectives
//! ([`losses`]), a single-encoder dual-decoder student with an EMA teacher
//! ([`model`]), deterministic augmentation ([`augment`]), a synthetic
//! ultrasound-like dataset ([`synth`]), segmentation metrics ([`metrics`]),
//! and the training loop itself ([`trainer`]).
//!
//! Everything is deterministic for a fixed seed within one precision mode;
//! data-parallel paths (generation, evaluation, verification sweeps) go
//! through [`exec`] and fall back to sequential iteration when the
//! `parallel` feature is disabled.

pub mod augment;
pub mod config;
pub mod entropy;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{HdcError, Result};
pub use tensor::{Real, Tensor};
