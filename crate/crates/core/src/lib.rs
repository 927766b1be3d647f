//! Blind corruption detection and restoration at desk scale.
//!
//! The pipeline: synthesize corrupted images with unknown irregular masks,
//! train per-pixel contrastive embeddings at three feature scales, recover
//! binary corruption masks by cosine K-means with coarse-to-fine quadtree
//! refinement, and restore the corrupted regions with a mask-guided
//! windowed-attention decoder.

pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{AdamState, Tape, Tensor, Var};
