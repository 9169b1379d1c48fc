//! Fine-grained specialization of class-agnostic object counters.
//!
//! Given only a category name, the pipeline
//!
//! 1. synthesizes pseudo-annotated images through a text-to-image backend and
//!    turns its cross-attention into coarse masks ([`synthesis`]),
//! 2. prompt-tunes a 512-dimensional concept embedding inside a frozen
//!    conditional segmenter using positive and hard-negative supervision
//!    ([`specializer`]),
//! 3. re-weights a frozen counter's density or point output with the mask the
//!    tuned embedding predicts ([`counting`]),
//!
//! and scores the result on point-annotated fine-grained datasets
//! ([`evaluation`]). [`pipeline`] wires the stages to an on-disk artifact
//! store and is what the `finecount` binary drives.
//!
//! All external models sit behind traits. The crate ships deterministic
//! stand-ins for each of them (a procedural shape renderer with exact
//! attention, a differentiable bilinear segmenter, a connected-component
//! counter) so the whole loop runs on a CPU in seconds.

pub mod counting;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod grid;
pub mod pipeline;
pub mod shapes;
pub mod specializer;
pub mod synthesis;
pub mod taxonomy;
mod util;

pub use util::slug;

pub use error::BackendError;

/// Dimension of the tunable concept embedding.
pub const EMBED_DIM: usize = 512;
