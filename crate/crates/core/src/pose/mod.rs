//! Pose recovery from 3D-2D correspondences: EPnP and a RANSAC wrapper.
//!
//! Both solvers work in `f64` internally whatever the caller's scalar type;
//! results are cast back on return.

mod epnp;
mod ransac;

use thiserror::Error;

pub use epnp::{epnp, epnp_correspondences, reprojection_errors};
pub use ransac::{ransac_pnp, EstimateSummary, ransac_sample, PoseEstimate, RansacParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("no consensus: best hypothesis has {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(&'static str),
    #[error("malformed pose estimate: {0}")]
    Parse(String),
}
