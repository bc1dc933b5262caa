//! Encoder-decoder OCR transformer with adapter sites and manual backpropagation.
//!
//! The encoder splits a line image into patches, embeds them with absolute
//! positions and runs post-norm self-attention layers. The decoder embeds
//! character tokens with learned positions and runs causal self-attention,
//! cross-attention over the encoder memory and a feed-forward block per layer,
//! followed by a projection to vocabulary logits.
//!
//! Gradients are derived by hand per operation. A training step materializes
//! every adapted weight once ([`OcrModel::materialize`]), accumulates
//! per-sample gradients of the effective weights, then folds them into
//! adapter factor and magnitude gradients ([`OcrModel::finish_grads`]).

pub mod checkpoint;
pub mod config;
pub mod inject;
pub mod network;
pub mod ops;
pub mod params;
pub mod tokens;

pub use checkpoint::Checkpoint;
pub use config::{Activation, ModelConfig};
pub use inject::{AdapterOptions, ParamCounts, SiteInventory, Strategy, StrategyPair};
pub use network::{Effective, Generation, OcrModel, Site, SiteAdapter};
pub use ops::{multi_head_attention, nll_loss, patchify, unpatchify, AttentionWeights, Mask};
pub use params::{Component, Grads, Param, ParamId, ParamKind, ParamStore};
pub use tokens::{TokenSequence, BOS, EOS, PAD, UNK};
