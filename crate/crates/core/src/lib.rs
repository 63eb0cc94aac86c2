//! Differentiable non-local label fusion for 3D volumetric segmentation.
//!
//! The pipeline combines a voxel-wise classification network (the unary
//! potential) with label fusion from an aligned atlas (the pairwise
//! potential), where each atlas voxel in a search cube votes with a weight
//! produced by a learned similarity MLP on feature differences. Everything
//! from the network to the loss is trained end to end through the
//! [`autodiff`] tape.

pub mod atlas;
pub mod autodiff;
pub mod classnet;
pub mod error;
pub mod evalx;
pub mod fusion;
pub mod simnet;
pub mod synth;
pub mod train;
pub mod volgrid;

pub use error::{Error, Result};
