//! Parameter-level circuits for a small transformer decoder: extraction by
//! differentiable masking, circuit-aware knowledge editing, and analysis of
//! how knowledge distributes across circuits.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] / [`gradcheck`]: dense f64 tensors with
//!   reverse-mode autodiff and a finite-difference oracle.
//! - [`model`]: a GPT-style decoder with a named, layer-tagged parameter
//!   registry, LM and classification heads, base training, checkpoints.
//! - [`data`]: synthetic task generators (hypernym hierarchy, determiner
//!   agreement, behavior statements), JSONL ingestion, and a word tokenizer.
//! - [`extract`]: hard-concrete gate training over maskable parameters and
//!   exact-size binarization into circuit masks.
//! - [`edit`]: masked SGD knowledge editing with strict zero maintenance.
//! - [`analysis`]: NLL distributions, circuit validation, overlaps, size
//!   sweeps, layer composition, bootstrap intervals.
//! - [`pipeline`]: run configs, artifact persistence, manifests; the CLI is
//!   a thin wrapper over this module.

pub mod analysis;
pub mod data;
pub mod edit;
pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
