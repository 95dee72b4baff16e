//! Core laboratory for studying dynamic-prompt backdoors on a small vision
//! transformer: a tape-based reverse-mode autodiff substrate, the frozen-backbone
//! micro ViT with prompt injection hooks, three attack backends (dynamic prompt
//! generator, static prompts, low-rank adapters), joint attack training, the
//! measurement procedures (dissection, pruning sweeps, perturbative fine-tuning),
//! defender-side trigger reversal, and a ridge/SVD toolkit for the linearized
//! fusion analysis.
//!
//! The crate is `no_std` + `alloc`: all numerics go through `libm`, so results
//! are bit-identical across platforms for a given seed. File formats, the CLI,
//! and wall-clock measurements live in the companion `fuselab` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod defense;
pub mod error;
pub mod rng;
pub mod theory;
pub mod train;
pub mod vit;

pub use error::CoreError;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
