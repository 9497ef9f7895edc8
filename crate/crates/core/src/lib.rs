//! Semi-supervised contrastive pre-training for dense segmentation.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`data`]: synthetic corpus generation, array-directory ingestion,
//!   preprocessing, volume-level splitting and paired augmentation.
//! - [`model`]: a 2-D U-Net with a global projection head and per-level
//!   local projection heads, with hand-written backward passes.
//! - [`losses`]: the global image-level contrastive loss, the local
//!   pixel-level contrastive loss under supervised and self-supervised set
//!   constructions, the stride/block reduction strategies and a brute-force
//!   reference evaluator.
//! - [`training`]: global pre-training, local pre-training, fine-tuning and
//!   the resumable multi-fold experiment matrix.
//! - [`eval`]: Dice metrics, embedding export and report rendering.
//! - [`config`]: the versioned experiment configuration.
//! - [`verify`]: randomized loss self-checks and the complexity benchmark.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
