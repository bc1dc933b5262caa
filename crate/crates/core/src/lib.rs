//! Parameter-efficient fine-tuning lab for a small encoder-decoder OCR transformer.
//!
//! The crate is split along the experiment pipeline:
//!
//! - [`adapters`]: LoRA and DoRA weight parameterizations with analytic gradients.
//! - [`model`]: a ViT-style patch encoder and an autoregressive character decoder
//!   with hand-derived backward passes and adapter injection sites.
//! - [`metrics`]: CER, WER / word accuracy and word-level F1 with corpus aggregation.
//! - [`data`]: deterministic synthetic text-line corpus (printed, handwritten, scene).
//! - [`harness`]: AdamW, training, evaluation, the ablation grid and config parsing.

pub mod adapters;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod table;

pub use error::{Error, Result};
