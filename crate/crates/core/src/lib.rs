//! Targeted adversarial attacks on prompt-guided segmentation models.
//!
//! The crate is organized around five pieces:
//!
//! - [`model`]: the segmentation model contract (encoder + prompt-guided
//!   decoder), a deterministic desk-scale toy model with exact input
//!   gradients, and the model-definition file format.
//! - [`attack`]: the constrained PGD loop and its objectives — the
//!   decoder-space clip-MSE attack, the encoder-feature attack (`pata`)
//!   with MSE/cosine/Huber variants, and the feature-dominance
//!   regularized variants (`pata_plus`, `pata_plus_plus`) — plus the
//!   momentum (MI) and kernel-smoothing (TI) gradient transforms.
//! - [`metrics`]: mask binarization, IoU/mIoU scoring, and the
//!   feature-dominance measure.
//! - [`prompts`]: prompt-set generation (random points, boxes, grids) and
//!   the cross-prompt transfer experiment.
//! - [`bench`]: the experiment harness behind the `pata` CLI — dataset
//!   ingestion, clean/target pairing, cross-model evaluation, sweeps,
//!   artifact persistence, plotting, and the budget audit.

pub mod attack;
pub mod bench;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{EmbeddingGrid, ImageTensor, MaskLogits, Prompt};
