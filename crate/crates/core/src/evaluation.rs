//! Dataset-level evaluation and the top-k ablation.
//!
//! Frames are processed one after another in manifest order; the heavy
//! stages parallelize internally. Numeric outputs depend only on the
//! manifest and the config, timing columns aside.

use std::io::Write;
use std::time::{Duration, Instant};

use crate::dataio::config::{Manifest, ManifestEntry, RunConfig};
use crate::dataio::kitti::{load_raw_pair, prepare_pair};
use crate::dataio::synthetic::SyntheticConfig;
use crate::matching::{patch_assignment, PatchSelection};
use crate::metrics::{aggregate, AggregateStats, MetricsError, RegistrationErrors};
use crate::pipeline::{
    correspondences_from_assignment, register_with_config, FrameInputs, PipelineError, StageTimes,
};
use crate::pose::{ransac_pnp, PoseError, PoseEstimate};
use crate::scalar::Real;

/// Synthetic scene settings implied by a run config.
pub fn synthetic_config(cfg: &RunConfig, seed: u64, outliers: usize) -> SyntheticConfig {
    SyntheticConfig {
        image_dims: cfg.image_dims(),
        d_patch: cfg.d_patch,
        d_pixel: cfg.d_pixel,
        max_xy_translation: cfg.max_xy_translation,
        yaw_range: cfg.yaw_range,
        ..SyntheticConfig::new(seed, cfg.map_height, cfg.map_width, outliers)
    }
}

/// Loads (or generates) one manifest frame.
pub fn load_frame<T: Real>(entry: &ManifestEntry, cfg: &RunConfig) -> Result<FrameInputs<T>, PipelineError> {
    match entry {
        ManifestEntry::Synthetic { seed, outliers } => {
            let scene = synthetic_config(cfg, *seed, *outliers).generate()?;
            FrameInputs::from_synthetic(scene, cfg)
        }
        ManifestEntry::Kitti {
            cloud,
            image,
            calib,
            perturb_seed,
        } => {
            let raw = load_raw_pair(cloud, image, calib)?;
            let pair = prepare_pair(&raw, &cfg.perturbation(*perturb_seed), cfg.image_dims(), &cfg.projection())?;
            FrameInputs::from_pair(pair, cfg)
        }
    }
}

/// Short status word for a pose outcome.
pub fn status_of<T: Real>(estimate: &Result<PoseEstimate<T>, PoseError>) -> &'static str {
    match estimate {
        Ok(_) => "ok",
        Err(PoseError::TooFew { .. }) => "too_few",
        Err(PoseError::NoConsensus { .. }) => "no_consensus",
        Err(PoseError::Degenerate(_)) => "degenerate",
        Err(_) => "error",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub label: String,
    pub correspondences: usize,
    pub inliers: usize,
    pub status: &'static str,
    /// Errors of the estimate; failed frames are scored with the identity.
    pub errors: RegistrationErrors,
    pub mean_reprojection_error: Option<f64>,
    pub times: StageTimes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub frames: Vec<FrameResult>,
    pub stats: AggregateStats,
}

pub fn evaluate_frame<T: Real>(label: String, inputs: &FrameInputs<T>, cfg: &RunConfig) -> Result<FrameResult, PipelineError> {
    let reg = register_with_config(inputs, cfg)?;
    let errors = reg.errors(&inputs.gt_extrinsics, cfg)?;
    Ok(FrameResult {
        label,
        correspondences: reg.correspondences.len(),
        inliers: reg.estimate.as_ref().map_or(0, |e| e.inlier_count()),
        status: status_of(&reg.estimate),
        errors,
        mean_reprojection_error: reg.estimate.as_ref().ok().map(|e| e.mean_reprojection_error.as_f64()),
        times: reg.times,
    })
}

/// Registers every frame of `manifest` and aggregates the errors.
pub fn evaluate<T: Real>(manifest: &Manifest, cfg: &RunConfig) -> Result<Evaluation, PipelineError> {
    if manifest.entries.is_empty() {
        return Err(MetricsError::EmptyList.into());
    }
    let mut frames = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let inputs = load_frame::<T>(entry, cfg)?;
        frames.push(evaluate_frame(entry.label(), &inputs, cfg)?);
    }
    let errors: Vec<RegistrationErrors> = frames.iter().map(|f| f.errors).collect();
    Ok(Evaluation {
        stats: aggregate(&errors)?,
        frames,
    })
}

pub const FRAMES_CSV_HEADER: &str = "frame,label,correspondences,inliers,status,rte,rre,success,mean_reprojection_error";

/// Per-frame results without timing columns.
pub fn write_frames_csv(out: &mut impl Write, frames: &[FrameResult]) -> std::io::Result<()> {
    writeln!(out, "{FRAMES_CSV_HEADER}")?;
    for (i, f) in frames.iter().enumerate() {
        let mre = f.mean_reprojection_error.map_or(String::new(), |v| format!("{v:.9e}"));
        writeln!(
            out,
            "{i},{},{},{},{},{:.9e},{:.9e},{},{mre}",
            f.label, f.correspondences, f.inliers, f.status, f.errors.rte, f.errors.rre, f.errors.success
        )?;
    }
    Ok(())
}

pub fn write_timing_csv(out: &mut impl Write, frames: &[FrameResult]) -> std::io::Result<()> {
    writeln!(out, "frame,label,assignment_s,refinement_s,pose_s,total_s")?;
    for (i, f) in frames.iter().enumerate() {
        let t = &f.times;
        writeln!(
            out,
            "{i},{},{:.6},{:.6},{:.6},{:.6}",
            f.label,
            t.assignment.as_secs_f64(),
            t.refinement.as_secs_f64(),
            t.pose.as_secs_f64(),
            t.total().as_secs_f64()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub stats: AggregateStats,
    /// Median over frames of the per-frame k-dependent matching time.
    pub median_time: Duration,
}

/// Repetitions of the timed stage per frame and k; the minimum is kept.
pub const ABLATION_REPS: usize = 5;

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Evaluates every `k` in `ks` on the same frames.
///
/// The patch assignment does not depend on `k` and is computed once per
/// frame. The timed stage is top-k selection, pixel refinement and the 3D
/// lookup, run on a single thread and repeated `reps` times (minimum kept).
pub fn ablate_topk<T: Real>(
    manifest: &Manifest,
    cfg: &RunConfig,
    ks: &[usize],
    reps: usize,
) -> Result<Vec<AblationRow>, PipelineError> {
    if manifest.entries.is_empty() || ks.is_empty() {
        return Err(MetricsError::EmptyList.into());
    }
    if ks.contains(&0) {
        return Err(crate::dataio::DataError::Format("k values must be >= 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| crate::dataio::DataError::Format(e.to_string()))?;
    let mut errors = vec![Vec::new(); ks.len()];
    let mut times = vec![Vec::new(); ks.len()];
    for entry in &manifest.entries {
        let inputs = load_frame::<T>(entry, cfg)?;
        let heads = inputs.heads();
        let p = patch_assignment(&inputs.camera, &inputs.lidar, &heads)?;
        for (j, &k) in ks.iter().enumerate() {
            let selection = PatchSelection::TopK(k);
            let mut best = Duration::MAX;
            let mut set = None;
            for _ in 0..reps.max(1) {
                let t0 = Instant::now();
                let out = pool.install(|| correspondences_from_assignment(&p, &inputs, &heads, &selection))?;
                best = best.min(t0.elapsed());
                set = Some(out.1);
            }
            let set = set.expect("at least one repetition");
            let estimate = ransac_pnp(&set, &inputs.intrinsics, &cfg.ransac());
            let pose = estimate.map(|e| e.pose).unwrap_or_else(|_| crate::geom::Pose::identity());
            errors[j].push(crate::metrics::registration_errors(
                &inputs.gt_extrinsics,
                &pose,
                &cfg.thresholds(),
                cfg.euler,
            )?);
            times[j].push(best);
        }
    }
    ks.iter()
        .zip(errors.into_iter().zip(times))
        .map(|(&k, (e, t))| {
            Ok(AblationRow {
                k,
                stats: aggregate(&e)?,
                median_time: median(t),
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "Top-k | RTE(m) | RRE(deg) | Acc(%) | Time(s)";

pub fn write_ablation_table(out: &mut impl Write, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} | {:.4}",
            r.k,
            r.stats.mean_rte,
            r.stats.std_rte,
            r.stats.mean_rre,
            r.stats.std_rre,
            r.stats.accuracy,
            r.median_time.as_secs_f64()
        )?;
    }
    Ok(())
}

/// Reproducibility record: command, config hash, every resolved key, frames.
pub fn run_manifest_text(command: &str, cfg: &RunConfig, manifest: Option<&Manifest>) -> String {
    let mut s = format!("command = {command}\nconfig_sha256 = {}\n{}", cfg.hash(), cfg.to_text());
    if let Some(m) = manifest {
        s.push_str("# frames\n");
        s.push_str(&m.to_text());
    }
    s
}
