//! Multimodal symptom-severity estimation.
//!
//! The crate covers the full pipeline: delayed channel-correlation features
//! ([`coordination`]), padded session matrices ([`session`]), a VQ-VAE that
//! compresses articulatory coordination features ([`cart`]), a small CNN stack
//! with analytic gradients ([`nn`]), unimodal and late-fusion models
//! ([`models`]), cross-validation and grid search ([`eval`]), synthetic corpora
//! with planted signals ([`synth`]) and the file-based workflow used by the CLI
//! ([`pipeline`]).

pub mod cart;
mod checkpoint;
pub mod coordination;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod session;
pub mod symptom;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use symptom::{map_bprs_to_class, SeverityClass, SymptomId, SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};
pub use tensor::{read_tensor, write_tensor, Tensor};
