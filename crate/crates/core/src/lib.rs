//! Multi-scale audio-visual synchrony learning for keypoint talking-head motion.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffnum`]: tensors, reverse-mode gradients, Adam, checkpoints.
//! * [`features`]: MFCC front-end, keypoint clips and the on-disk corpus.
//! * [`pyramid`]: temporal Gaussian pyramids and fixed-width AV segments.
//! * [`syncer`]: per-level contrastive audio/motion embedding models.
//! * [`generator`] and [`discriminator`]: the autoregressive motion GAN.
//! * [`training`]: loss assembly and the alternating optimisation loop.
//! * [`synthgen`]: a synthetic corpus with known audio-motion coupling.
//! * [`eval`]: multi-scale AV offset and confidence metrics.

pub mod diffnum;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod nn;
pub mod pyramid;
pub mod syncer;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};

/// Number of facial keypoints.
pub const NUM_KEYPOINTS: usize = 10;
/// Values per keypoint: 2-d position followed by a row-major 2x2 Jacobian.
pub const KEYPOINT_STRIDE: usize = 6;
/// Flattened keypoint frame width.
pub const FRAME_DIM: usize = NUM_KEYPOINTS * KEYPOINT_STRIDE;
/// MFCC coefficients per audio frame.
pub const MFCC_DIM: usize = 26;
/// Audio frames per video frame (25 fps video, 10 ms hop).
pub const AUDIO_PER_VIDEO: usize = 4;
/// Number of pyramid levels.
pub const NUM_LEVELS: usize = 4;
