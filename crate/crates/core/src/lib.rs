//! LiDAR-to-camera extrinsic registration.
//!
//! A scan is projected into LaserID range and reflectance maps, dense
//! descriptors on both sides are matched coarse-to-fine with a dual-softmax
//! assignment, and the extrinsics are recovered with EPnP inside RANSAC.
//! Every numeric type is generic over [`Real`] (`f32` or `f64`).

// `!(x <= tol)` checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod evaluation;
pub mod features;
pub mod geom;
pub mod grid;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod projection;
pub mod scalar;
pub mod supervision;

pub use scalar::Real;

pub type Pose64 = geom::Pose<f64>;
pub type Pose32 = geom::Pose<f32>;
pub type Intrinsics64 = geom::Intrinsics<f64>;
pub type Intrinsics32 = geom::Intrinsics<f32>;
pub type PointCloud64 = projection::PointCloud<f64>;
pub type PointCloud32 = projection::PointCloud<f32>;
pub type ProjectionMaps64 = projection::ProjectionMaps<f64>;
pub type ProjectionMaps32 = projection::ProjectionMaps<f32>;
pub type FeatureMaps64 = features::FeatureMaps<f64>;
pub type FeatureMaps32 = features::FeatureMaps<f32>;
pub type PoseEstimate64 = pose::PoseEstimate<f64>;
pub type PoseEstimate32 = pose::PoseEstimate<f32>;
pub type SyntheticScene64 = dataio::SyntheticScene<f64>;
pub type SyntheticScene32 = dataio::SyntheticScene<f32>;
