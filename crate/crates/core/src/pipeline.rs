//! Coarse-to-fine registration of one frame: features, matching, pose.

use std::time::{Duration, Instant};

use image::RgbImage;
use thiserror::Error;

use crate::dataio::config::{FeatureMode, RunConfig};
use crate::dataio::{DataError, FramePair, SyntheticScene};
use crate::features::{extract_builtin, extract_lidar, luma, FeatureError, FeatureMaps};
use crate::geom::{Intrinsics, Pose};
use crate::matching::{
    build_correspondences, patch_assignment, refine, AssignmentMatrix, CorrespondenceSet, MatchError, MatchHeads,
    MatchOutput, PatchSelection,
};
use crate::metrics::{registration_errors, MetricsError, RegistrationErrors};
use crate::pose::{ransac_pnp, PoseError, PoseEstimate, RansacParams};
use crate::projection::{PointCloud, ProjectionMaps};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything matching needs about one frame.
#[derive(Debug, Clone)]
pub struct FrameInputs<T: Real> {
    /// Camera image at matching resolution.
    pub image: RgbImage,
    pub camera: FeatureMaps<T>,
    pub lidar: FeatureMaps<T>,
    pub maps: ProjectionMaps<T>,
    pub cloud: PointCloud<T>,
    pub intrinsics: Intrinsics<T>,
    pub gt_extrinsics: Pose<T>,
}

impl<T: Real> FrameInputs<T> {
    /// Builtin descriptors on both sides of a prepared pair.
    pub fn from_pair(pair: FramePair<T>, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let camera = extract_builtin(&luma(&pair.image), cfg.d_patch, cfg.d_pixel)?;
        let lidar = extract_lidar(&pair.maps, &cfg.projection(), cfg.d_patch, cfg.d_pixel)?;
        Ok(Self {
            image: pair.image,
            camera,
            lidar,
            maps: pair.maps,
            cloud: pair.cloud,
            intrinsics: pair.intrinsics,
            gt_extrinsics: pair.gt_extrinsics,
        })
    }

    /// Ideal codes in [`FeatureMode::Auto`], builtin descriptors otherwise.
    pub fn from_synthetic(scene: SyntheticScene<T>, cfg: &RunConfig) -> Result<Self, PipelineError> {
        if cfg.features == FeatureMode::Builtin {
            let mut c = cfg.clone();
            c.map_width = scene.config.w_r;
            c.map_height = scene.config.n_lasers;
            return Self::from_pair(scene.frame_pair(), &c);
        }
        Ok(Self {
            image: scene.image,
            camera: scene.camera_features,
            lidar: scene.lidar_features,
            maps: scene.maps,
            cloud: scene.cloud,
            intrinsics: scene.intrinsics,
            gt_extrinsics: scene.gt_extrinsics,
        })
    }

    pub fn heads(&self) -> MatchHeads<T> {
        MatchHeads::identity_for(&self.camera)
    }
}

/// Wall-clock time of each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    /// Patch scores and dual-softmax.
    pub assignment: Duration,
    /// Top-k selection, pixel refinement and 3D lookup.
    pub refinement: Duration,
    pub pose: Duration,
}

impl StageTimes {
    pub fn matching(&self) -> Duration {
        self.assignment + self.refinement
    }

    pub fn total(&self) -> Duration {
        self.assignment + self.refinement + self.pose
    }
}

#[derive(Debug, Clone)]
pub struct Registration<T: Real> {
    pub matches: MatchOutput<T>,
    pub correspondences: CorrespondenceSet<T>,
    /// Pose failures (too few matches, no consensus) are results, not errors.
    pub estimate: Result<PoseEstimate<T>, PoseError>,
    pub times: StageTimes,
}

impl<T: Real> Registration<T> {
    /// Estimated extrinsics, or identity when the pose stage failed.
    pub fn pose_or_identity(&self) -> Pose<T> {
        self.estimate.as_ref().map(|e| e.pose).unwrap_or_else(|_| Pose::identity())
    }

    pub fn errors(&self, gt: &Pose<T>, cfg: &RunConfig) -> Result<RegistrationErrors, MetricsError> {
        registration_errors(gt, &self.pose_or_identity(), &cfg.thresholds(), cfg.euler)
    }
}

/// Selection, refinement and 3D lookup on a precomputed patch assignment.
pub fn correspondences_from_assignment<T: Real>(
    p: &AssignmentMatrix<T>,
    inputs: &FrameInputs<T>,
    heads: &MatchHeads<T>,
    selection: &PatchSelection,
) -> Result<(MatchOutput<T>, CorrespondenceSet<T>), PipelineError> {
    let matches = refine(p, &inputs.camera, &inputs.lidar, heads, selection)?;
    let set = build_correspondences(&matches.pixel_matches, &inputs.maps, &inputs.cloud)?;
    Ok((matches, set))
}

/// Full registration: assignment, top-k, pixel refinement, RANSAC-EPnP.
pub fn register<T: Real>(
    inputs: &FrameInputs<T>,
    heads: &MatchHeads<T>,
    selection: &PatchSelection,
    ransac: &RansacParams,
) -> Result<Registration<T>, PipelineError> {
    let t0 = Instant::now();
    let p = patch_assignment(&inputs.camera, &inputs.lidar, heads)?;
    let t1 = Instant::now();
    let (matches, correspondences) = correspondences_from_assignment(&p, inputs, heads, selection)?;
    drop(p);
    let t2 = Instant::now();
    let estimate = ransac_pnp(&correspondences, &inputs.intrinsics, ransac);
    let t3 = Instant::now();
    Ok(Registration {
        matches,
        correspondences,
        estimate,
        times: StageTimes {
            assignment: t1 - t0,
            refinement: t2 - t1,
            pose: t3 - t2,
        },
    })
}

/// [`register`] with the heads, top-k and RANSAC settings of `cfg`.
pub fn register_with_config<T: Real>(inputs: &FrameInputs<T>, cfg: &RunConfig) -> Result<Registration<T>, PipelineError> {
    register(inputs, &inputs.heads(), &PatchSelection::TopK(cfg.top_k), &cfg.ransac())
}
