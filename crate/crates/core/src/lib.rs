//! Inference- and evaluation-side machinery for joint lacune / EPVS detection
//! on 3D brain MRI.
//!
//! The crate is organized bottom-up:
//!
//! * [`volume`]: voxel grids, geometry and NIfTI-1 I/O.
//! * [`edt`]: exact separable Euclidean distance transform.
//! * [`anatomy`]: reliability zones from a parcellation and the truncated
//!   one-sided distance field.
//! * [`calibrate`]: spatially adaptive thresholding and lesion extraction.
//! * [`match_eval`]: instance matching and per-case metrics.
//! * [`cohort`]: population statistics, bootstrap intervals, Wilcoxon test.
//! * [`kernels`]: loss functions and the gated cross-task attention forward
//!   pass, with analytic gradients.
//!
//! Data-parallel loops go through [`par::Exec`]. With the `parallel` feature
//! (on by default) they run on the rayon global pool; without it every path
//! is sequential. Results are identical either way.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod anatomy;
pub mod calibrate;
pub mod cohort;
pub mod edt;
pub mod error;
pub mod kernels;
pub mod match_eval;
pub mod par;
pub mod volume;

pub use error::{Error, Result};
