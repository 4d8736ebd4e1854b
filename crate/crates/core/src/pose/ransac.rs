//! Hypothesize-and-verify wrapper around EPnP.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::epnp::{reprojection_errors, solve, split_f64};
use super::PoseError;
use crate::geom::{Intrinsics, Pose};
use crate::matching::CorrespondenceSet;
use crate::scalar::Real;

/// Hypotheses evaluated per parallel batch.
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Reprojection error (pixels) strictly below which a correspondence is an inlier.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// Probability of having drawn one all-inlier sample, for early exit.
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 2.0,
            min_inliers: 10,
            sample_size: 4,
            seed: 0,
            confidence: 0.999,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(PoseError::InvalidParams("inlier_threshold must be positive"));
        }
        if self.sample_size < 4 {
            return Err(PoseError::InvalidParams("sample_size must be at least 4"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::InvalidParams("confidence must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(PoseError::InvalidParams("max_iterations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate<T: Real> {
    pub pose: Pose<T>,
    pub inlier_mask: Vec<bool>,
    /// Mean reprojection error over the inliers of `inlier_mask`.
    pub mean_reprojection_error: T,
    /// Mean error of the best hypothesis over its own inliers.
    pub hypothesis_error: T,
    /// Mean error of the returned pose over the best hypothesis' inliers.
    pub refit_error: T,
    /// Hypotheses drawn before stopping.
    pub iterations: usize,
}

impl<T: Real> PoseEstimate<T> {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|b| **b).count()
    }
}

/// Sample of iteration `iteration`: `size` distinct indices below `n`, drawn
/// from stream `iteration` of a ChaCha8 generator seeded with `seed`.
pub fn ransac_sample(seed: u64, iteration: usize, n: usize, size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    index::sample(&mut rng, n, size).into_vec()
}

struct Hypothesis {
    pose: Pose<f64>,
    mask: Vec<bool>,
    count: usize,
    mean: f64,
}

fn score(pose: Pose<f64>, pts: &[Vector3<f64>], px: &[Vector2<f64>], k: &Intrinsics<f64>, thr: f64) -> Hypothesis {
    let err = reprojection_errors(&pose, pts, px, k);
    let mask: Vec<bool> = err.iter().map(|e| *e < thr).collect();
    let (count, sum) = err
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .fold((0usize, 0.0), |(c, s), (e, _)| (c + 1, s + e));
    Hypothesis {
        pose,
        mask,
        count,
        mean: if count > 0 { sum / count as f64 } else { f64::INFINITY },
    }
}

fn masked_mean(pose: &Pose<f64>, mask: &[bool], pts: &[Vector3<f64>], px: &[Vector2<f64>], k: &Intrinsics<f64>) -> (f64, f64) {
    let err = reprojection_errors(pose, pts, px, k);
    let (n, sum, worst) = err
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0usize, 0.0, 0.0f64), |(n, s, w), (e, _)| (n + 1, s + e, w.max(*e)));
    (sum / n.max(1) as f64, worst)
}

/// Iterations needed to draw one all-inlier sample with `confidence`.
fn required_iterations(inlier_ratio: f64, sample: usize, confidence: f64, cap: usize) -> usize {
    let good = inlier_ratio.powi(sample as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() && n < cap as f64 {
        (n as usize).max(1)
    } else {
        cap
    }
}

/// Robust pose from a correspondence set.
///
/// Samples are drawn per iteration from independent generator streams, so
/// hypotheses are evaluated in parallel batches while the result stays
/// identical to a serial run. The best hypothesis has the most inliers, ties
/// going to the lower mean error. A final EPnP refit on its inliers is kept
/// only when it lowers their mean error and keeps each below the threshold.
pub fn ransac_pnp<T: Real>(
    set: &CorrespondenceSet<T>,
    k: &Intrinsics<T>,
    params: &RansacParams,
) -> Result<PoseEstimate<T>, PoseError> {
    params.validate()?;
    let n = set.len();
    if n < params.sample_size {
        return Err(PoseError::TooFew {
            needed: params.sample_size,
            got: n,
        });
    }
    let (pts, px) = split_f64(set);
    let k64: Intrinsics<f64> = k.cast();
    let thr = params.inlier_threshold;

    let mut best: Option<Hypothesis> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    'outer: while it < needed {
        let batch_end = (it + BATCH).min(needed);
        let hyps: Vec<Option<Hypothesis>> = (it..batch_end)
            .into_par_iter()
            .map(|i| {
                let sample = ransac_sample(params.seed, i, n, params.sample_size);
                let sp: Vec<_> = sample.iter().map(|&j| pts[j]).collect();
                let sx: Vec<_> = sample.iter().map(|&j| px[j]).collect();
                solve(&sp, &sx, &k64).ok().map(|pose| score(pose, &pts, &px, &k64, thr))
            })
            .collect();
        for h in hyps {
            it += 1;
            if let Some(h) = h {
                let better = best
                    .as_ref()
                    .is_none_or(|b| h.count > b.count || (h.count == b.count && h.mean < b.mean));
                if better {
                    needed = required_iterations(
                        h.count as f64 / n as f64,
                        params.sample_size,
                        params.confidence,
                        params.max_iterations,
                    );
                    best = Some(h);
                }
            }
            if it >= needed {
                break 'outer;
            }
        }
    }

    let best_count = best.as_ref().map_or(0, |b| b.count);
    let Some(best) = best.filter(|b| b.count >= params.min_inliers) else {
        return Err(PoseError::NoConsensus {
            best: best_count,
            required: params.min_inliers,
        });
    };

    let inl_pts: Vec<_> = pts.iter().zip(&best.mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    let inl_px: Vec<_> = px.iter().zip(&best.mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    let hyp_err = best.mean;
    let mut pose = best.pose;
    let mut refit_err = hyp_err;
    if let Ok(refit) = solve(&inl_pts, &inl_px, &k64) {
        let (mean, worst) = masked_mean(&refit, &best.mask, &pts, &px, &k64);
        if mean <= hyp_err && worst < thr {
            pose = refit;
            refit_err = mean;
        }
    }
    let final_h = if refit_err < hyp_err { score(pose, &pts, &px, &k64, thr) } else { best };

    Ok(PoseEstimate {
        pose: final_h.pose.cast(),
        inlier_mask: final_h.mask,
        mean_reprojection_error: T::lit(final_h.mean),
        hypothesis_error: T::lit(hyp_err),
        refit_error: T::lit(refit_err),
        iterations: it,
    })
}

impl<T: Real> fmt::Display for PoseEstimate<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = self.pose.to_row();
        let parts: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        writeln!(f, "{}", parts.join(" "))?;
        writeln!(
            f,
            "# inliers={} mean_error={}",
            self.inlier_count(),
            self.mean_reprojection_error.as_f64()
        )
    }
}

/// Pose row and summary line of a serialized estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary<T: Real> {
    pub pose: Pose<T>,
    pub inliers: usize,
    pub mean_error: f64,
}

impl<T: Real> FromStr for EstimateSummary<T> {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty());
        let row = lines.next().ok_or_else(|| PoseError::Parse("empty input".into()))?;
        let pose: Pose<T> = row.parse().map_err(|e| PoseError::Parse(format!("{e}")))?;
        let comment = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| PoseError::Parse("missing summary line".into()))?;
        let mut inliers = None;
        let mut mean_error = None;
        for field in comment.split_whitespace() {
            match field.split_once('=') {
                Some(("inliers", v)) => inliers = v.parse().ok(),
                Some(("mean_error", v)) => mean_error = v.parse().ok(),
                _ => {}
            }
        }
        Ok(Self {
            pose,
            inliers: inliers.ok_or_else(|| PoseError::Parse("missing inliers".into()))?,
            mean_error: mean_error.ok_or_else(|| PoseError::Parse("missing mean_error".into()))?,
        })
    }
}
