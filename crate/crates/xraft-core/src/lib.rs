//! Cross-modal dense optical flow toolkit.
//!
//! The crate bundles a small deterministic autodiff tensor engine, flow
//! field semantics (warping, composition, consistency masks), hyperspectral
//! cube handling with synthetic modality generation, a recurrent all-pairs
//! flow model with per-modality-pair encoder banks, self-supervised
//! cycle-consistency fine-tuning, and an evaluation harness built around
//! synthetic elastic deformations.

pub mod config;
pub mod error;
pub mod eval;
pub mod fields;
pub mod flow;
pub mod imaging;
pub mod io;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
