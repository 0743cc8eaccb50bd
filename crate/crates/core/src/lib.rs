//! Class-conditional ("dynamic head") segmentation of partially labeled
//! glomerular lesion patches.
//!
//! A residual U-Net produces a bottleneck feature `F` and a decoder map `M`.
//! A controller maps `GAP(F) || onehot(class)` to the weights of a three-layer
//! 1×1 convolutional head, which turns `M` into per-class logits. Training
//! runs on partially labeled data (one annotated class per patch) through a
//! per-class image pool, and evaluation reports Dice, Hausdorff distance and
//! mean surface distance in microns.

pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Error, Result};
