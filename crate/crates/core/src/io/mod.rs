//! File formats: Netpbm images, run configuration, checkpoints.

pub mod checkpoint;
pub mod config;
pub mod pnm;
