//! Numerical core for a thermal object-detection pipeline: a multi-view
//! contrastive objective, dense multi-scale attention, Hungarian set-prediction
//! loss with complete-IoU box regression, and COCO-style mAP evaluation.
//!
//! Every analytic gradient in the crate is checked against central finite
//! differences (see [`verify`]). Batch workloads run on rayon when the
//! `parallel` feature is enabled and fall back to sequential iteration
//! otherwise; results are identical either way.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod numerics;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::{BoxCxcywh, BoxXyxy};
