//! Multigrid filter-flow estimation between video frames.
//!
//! Per-pixel `k x k` kernels (stored as softmax logits) reconstruct one frame
//! from another. Large motions are handled by composing small residual
//! kernels over a resolution pyramid, and the expected offset of each kernel
//! gives a coordinate flow used for warping masks and keypoints.

pub mod config;
pub mod error;
pub mod filter_flow;
pub mod grid;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod multigrid;
pub mod predictor;
pub mod synth;
pub mod toolkit;
pub mod tracker;

pub use error::{Error, Result};
pub use filter_flow::{CoordinateFlow, FilterFlowField};
pub use grid::Image;
pub use losses::{LossBreakdown, LossWeights};
