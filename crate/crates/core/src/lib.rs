//! Overlap-region-aware point cloud sampling for memory-efficient rigid
//! registration.
//!
//! The crate compresses a pair of point clouds with a kNN encoder and
//! cross-attention, predicts per-point overlap and matchability scores,
//! propagates them to every input point and keeps a point budget
//! concentrated in the overlap region. Baseline samplers, a RANSAC/Kabsch
//! registration backend, analytic memory accounting and an evaluation
//! harness sit around that core.

pub mod config;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod pipeline;
pub mod samplers;
pub mod seed;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{OverlapLabels, PointCloud, RigidTransform};
pub use spatial::SpatialIndex;
