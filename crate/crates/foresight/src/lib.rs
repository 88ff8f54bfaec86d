//! Stochastic action-conditioned video prediction for robot grasping.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`action`] — decomposition of semantic grasp actions into element
//!   actions and elementary end-effector movements.
//! - [`data`] — HDF5 trajectory containers, training windows, and a seeded
//!   synthetic scene generator.
//! - [`model`] — the prediction network: per-network frame encoders, action
//!   encoders, convolutional LSTMs, a learned prior, a posterior, and a
//!   decoder, plus autoregressive rollout.
//! - [`training`] — the variational objective (ℓ1 reconstruction + KL to the
//!   learned prior), Adam, checkpointing, and the fit loop.
//! - [`metrics`] — PSNR, SSIM, LPIPS (pluggable feature extractor), and
//!   Fréchet video distance.
//! - [`eval`] — the best/average-of-N sampling protocol with per-stage
//!   breakdowns and serialized reports.
//! - [`cli`] — the `foresight` binary's subcommands.
//!
//! See the crate's `examples/` directory for one runnable example per
//! capability; start with `decompose_grasp` and `train_overfit`.

pub mod action;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;
