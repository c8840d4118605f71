//! FOCUS: multi-view foot-surface reconstruction from dense template object
//! coordinate (TOC) predictions.
//!
//! Two reconstruction routes share the same inputs (per-view TOC, normal and
//! mask rasters plus calibrated cameras):
//!
//! * [`sfm`] matches TOC values across views, triangulates the matches and
//!   fuses them into an oriented point cloud;
//! * [`optim`] fits a deformable template model by minimizing an
//!   uncertainty-weighted reprojection loss.
//!
//! [`synth`] provides a software rasterizer and a prediction emulator so the
//! whole pipeline can be exercised against procedurally generated scenes with
//! known ground truth, and [`eval`] implements the surface-comparison metrics.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod optim;
pub mod sfm;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};

/// Scalar type used throughout the pipeline.
pub type Real = f64;
pub type Point3 = nalgebra::Point3<Real>;
pub type Vector3 = nalgebra::Vector3<Real>;
pub type Vector2 = nalgebra::Vector2<Real>;
pub type Matrix3 = nalgebra::Matrix3<Real>;
