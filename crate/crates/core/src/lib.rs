//! Fine-grained Mixture-of-Experts transformers at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a small reverse-mode
//!   differentiation engine, with [`gradcheck`] as its finite-difference
//!   oracle.
//! - [`moe`]: linear router, Top-k under both softmax orderings,
//!   capacity-factor dispatch with token dropping, expert combine, and the
//!   load-balancing and z auxiliary losses.
//! - [`model`]: a decoder-only transformer with partial rotary embeddings
//!   whose every feed-forward block is an MoE layer.
//! - [`configplan`]: the granularity transform and exact parameter / FLOPs
//!   accounting for the 11B and 56B model families.
//! - [`training`]: AdamW, cosine schedules with warmup, the
//!   continued-pretraining schedule, gradient clipping, synthetic data and the
//!   training loop.
//! - [`analysis`]: expert-parallel load fractions, per-rank gate medians and
//!   training-step savings, plus their CSV/JSON exports.
//! - [`cli`]: the `plan` / `train` / `analyze` command line.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod configplan;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
