//! Distributed multi-agent perception with learned feature exchange.
//!
//! A swarm of agents observes one scene from shifted, rotated, partially
//! overlapping viewpoints; the primary agent's image carries a rectangular
//! noise degradation. Each agent encodes its image into a spatial feature
//! grid, exchanges grids with its neighbors, matches incoming cells against
//! its own through a dense similarity volume with an explicit no-match
//! channel, smooths that volume with a small convolutional network, warps
//! the best-matching foreign features into its own frame, fuses them by
//! per-cell hard selection, and decodes the result into a semantic mask.
//!
//! The crate ships the numerical substrate (a minimal reverse-mode autodiff
//! tape), a procedural multi-view dataset generator with exact ground-truth
//! cell correspondences, the full training harness with baselines and
//! ablations, evaluation metrics, and a message-passing swarm simulator
//! with bandwidth accounting. See the `examples/` directory for runnable
//! entry points into each capability, or the `swarmfuse` binary for the
//! batch CLI.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod correspond;
pub mod error;
pub mod fuse;
pub mod metrics;
pub mod scenegen;
pub mod smooth;
pub mod swarm;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
