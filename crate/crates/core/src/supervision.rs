//! Ground-truth correspondences from known extrinsics and the matching losses.
//!
//! Losses are plain functions of assignment matrices; no gradients are
//! computed here. Probabilities are clamped below at [`LOG_CLAMP`] before
//! taking logarithms.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::Vector3;
use thiserror::Error;

use crate::features::{FeatureMaps, HeadPair, PATCH};
use crate::geom::{Intrinsics, Pose};
use crate::matching::{block_assignment, AssignmentMatrix, MatchError, PatchGrids, PatchSelection};
use crate::projection::{PointCloud, ProjectionMaps};
use crate::scalar::Real;

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("{assignments} assignment matrices for {offsets} ground-truth offsets")]
    LengthMismatch { assignments: usize, offsets: usize },
    #[error("ground-truth entry ({row}, {col}) outside a {rows}x{cols} assignment matrix")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Image pixel `(u, v)` paired with a projection-map pixel `(u, v)`.
pub type PixelPair = ((usize, usize), (usize, usize));

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthCorrs<T: Real> {
    pub pixel_corrs: Vec<PixelPair>,
    /// 3D point behind each map pixel, in the LiDAR frame.
    pub points: Vec<Vector3<T>>,
}

impl<T: Real> GroundTruthCorrs<T> {
    pub fn len(&self) -> usize {
        self.pixel_corrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_corrs.is_empty()
    }

    /// Patch coordinates `(u / 4, v / 4)` on each side.
    pub fn patch_corrs(&self) -> Vec<PixelPair> {
        self.pixel_corrs.iter().map(|&(a, b)| (patch_of(a), patch_of(b))).collect()
    }

    /// In-patch offsets `(u % 4, v % 4)` on each side.
    pub fn within_patch_offsets(&self) -> Vec<PixelPair> {
        self.pixel_corrs.iter().map(|&(a, b)| (offset_of(a), offset_of(b))).collect()
    }

    /// Flattened `(camera, lidar)` entries of the patch assignment matrix.
    pub fn patch_entries(&self, grids: PatchGrids) -> Vec<(usize, usize)> {
        self.patch_corrs()
            .into_iter()
            .map(|((cu, cv), (lu, lv))| (cv * grids.camera.1 + cu, lv * grids.lidar.1 + lu))
            .collect()
    }

    /// Flattened `(camera, lidar)` entries of each 16×16 pixel assignment.
    pub fn offset_entries(&self) -> Vec<(usize, usize)> {
        self.within_patch_offsets()
            .into_iter()
            .map(|((cu, cv), (lu, lv))| (cv * PATCH + cu, lv * PATCH + lu))
            .collect()
    }

    /// Patch pairs as `(row, col)`, one per correspondence, for the
    /// training-mode bypass of top-k selection.
    pub fn patch_selection(&self) -> PatchSelection {
        PatchSelection::Given(
            self.patch_corrs()
                .into_iter()
                .map(|((cu, cv), (lu, lv))| ((cv, cu), (lv, lu)))
                .collect(),
        )
    }

    /// CSV with the correspondence columns plus patch and offset columns.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "u_img,v_img,u_map,v_map,x,y,z,confidence,pu_img,pv_img,pu_map,pv_map,du_img,dv_img,du_map,dv_map"
        )?;
        for (&(img, map), p) in self.pixel_corrs.iter().zip(&self.points) {
            let (pi, pm) = (patch_of(img), patch_of(map));
            let (oi, om) = (offset_of(img), offset_of(map));
            writeln!(
                out,
                "{},{},{},{},{},{},{},1,{},{},{},{},{},{},{},{}",
                img.0,
                img.1,
                map.0,
                map.1,
                p.x.as_f64(),
                p.y.as_f64(),
                p.z.as_f64(),
                pi.0,
                pi.1,
                pm.0,
                pm.1,
                oi.0,
                oi.1,
                om.0,
                om.1
            )?;
        }
        Ok(())
    }
}

pub fn patch_of(px: (usize, usize)) -> (usize, usize) {
    (px.0 / PATCH, px.1 / PATCH)
}

pub fn offset_of(px: (usize, usize)) -> (usize, usize) {
    (px.0 % PATCH, px.1 % PATCH)
}

/// Projects the point behind every occupied map pixel through `t_gt` and
/// `k`, rounds to the nearest pixel and keeps pairs inside the
/// `width × height` image. Map pixels are visited in row-major order.
pub fn ground_truth_corrs<T: Real>(
    cloud: &PointCloud<T>,
    maps: &ProjectionMaps<T>,
    k: &Intrinsics<T>,
    t_gt: &Pose<T>,
    image_dims: (usize, usize),
) -> GroundTruthCorrs<T> {
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    let mut out = GroundTruthCorrs {
        pixel_corrs: Vec::new(),
        points: Vec::new(),
    };
    for (u, v, idx) in maps.occupied_pixels() {
        let Some(p) = cloud.points().get(idx) else {
            continue;
        };
        let Some(q) = k.project_unbounded(&t_gt.apply(&p.position)) else {
            continue;
        };
        let (x, y) = (q.x.as_f64().round(), q.y.as_f64().round());
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            out.pixel_corrs.push(((x as usize, y as usize), (u, v)));
            out.points.push(p.position);
        }
    }
    out
}

fn neg_log<T: Real>(p: T) -> f64 {
    -p.as_f64().max(LOG_CLAMP).ln()
}

/// Mean negative log of `P` over the distinct ground-truth patch entries.
pub fn patch_loss<T: Real>(
    p: &AssignmentMatrix<T>,
    gt: &GroundTruthCorrs<T>,
    grids: PatchGrids,
) -> Result<f64, SupervisionError> {
    let entries: BTreeSet<(usize, usize)> = gt.patch_entries(grids).into_iter().collect();
    patch_loss_entries(p, &entries)
}

/// [`patch_loss`] over explicit flattened `(camera, lidar)` entries.
pub fn patch_loss_entries<T: Real>(
    p: &AssignmentMatrix<T>,
    entries: &BTreeSet<(usize, usize)>,
) -> Result<f64, SupervisionError> {
    if entries.is_empty() {
        return Err(SupervisionError::EmptyGroundTruth);
    }
    let mut sum = 0.0;
    for &(i, j) in entries {
        if i >= p.nrows() || j >= p.ncols() {
            return Err(SupervisionError::IndexOutOfRange {
                row: i,
                col: j,
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
        sum += neg_log(p.values()[(i, j)]);
    }
    Ok(sum / entries.len() as f64)
}

/// Mean negative log of each 16×16 assignment at its ground-truth entry
/// `(camera offset, lidar offset)`, offsets flattened row-major in the block.
pub fn pixel_loss<T: Real>(
    assignments: &[AssignmentMatrix<T>],
    offsets: &[(usize, usize)],
) -> Result<f64, SupervisionError> {
    if assignments.len() != offsets.len() || offsets.is_empty() {
        return Err(SupervisionError::LengthMismatch {
            assignments: assignments.len(),
            offsets: offsets.len(),
        });
    }
    let mut sum = 0.0;
    for (p, &(i, j)) in assignments.iter().zip(offsets) {
        if i >= p.nrows() || j >= p.ncols() {
            return Err(SupervisionError::IndexOutOfRange {
                row: i,
                col: j,
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
        sum += neg_log(p.values()[(i, j)]);
    }
    Ok(sum / offsets.len() as f64)
}

pub fn total_loss(patch: f64, pixel: f64) -> f64 {
    patch + pixel
}

/// Per-correspondence pixel assignments in training mode: the 16×16
/// assignment of each ground-truth patch pair.
pub fn training_pixel_assignments<T: Real>(
    gt: &GroundTruthCorrs<T>,
    camera: &FeatureMaps<T>,
    lidar: &FeatureMaps<T>,
    heads: &HeadPair<T>,
) -> Result<Vec<AssignmentMatrix<T>>, SupervisionError> {
    gt.patch_corrs()
        .into_iter()
        .map(|((cu, cv), (lu, lv))| {
            block_assignment((cv, cu), (lv, lu), camera.pixel(), lidar.pixel(), heads).map_err(Into::into)
        })
        .collect()
}
