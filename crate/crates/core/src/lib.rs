//! Two-branch invariance learning for point-cloud out-of-distribution
//! generalization.
//!
//! The pipeline augments each input cloud with a parameterized transform
//! (rotation/affine) followed by a non-parameterized one (drop/resample),
//! runs both the original and augmented clouds through a shared-weight
//! feature extractor with learnable anchor points, and trains with a task
//! loss plus Chamfer, local-invariance and global-invariance terms.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod train;
pub mod verify;
