//! View selection for CT trajectories by discrete data completeness.
//!
//! Candidate X-ray views are scored by which sampled plane normals around each
//! voxel of interest they cover (`|d·u| < sin Δγ`). Views whose projected ROI
//! absorbs more than `α` are unselectable. `k` views are then chosen to
//! maximize coverage, by greedy, by an equidistant circle, or exactly by
//! branch-and-bound with a reported optimality gap.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: vectors, half-sphere sampling, candidate trajectories, detector hits
//! - [`phantom`]: voxel phantoms, ray traversal, Beer-Lambert projections, absorption
//! - [`completeness`]: the coverage matrix
//! - [`select`]: the selection problem and its solvers
//! - [`recon`]: SART reconstruction and SSIM / PSNR / CNR
//! - [`pipeline`]: the config-driven end-to-end runner behind the CLI

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bitset;
pub mod completeness;
pub mod error;
pub mod geometry;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod select;

pub use error::{Error, Result};
