//! Patch-to-pixel matching: score matrix, dual-softmax assignment, top-k
//! patch selection, top-1 pixel refinement and 3D-2D correspondences.
//!
//! Feature maps are flattened row-major, so patch `(row, col)` of a grid
//! `Wp` patches wide has index `row · Wp + col`. Rows of a score matrix are
//! camera patches, columns are LiDAR patches.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{DenseFeatures, FeatureError, FeatureMaps, HeadPair, PATCH};
use crate::projection::{unproject_pixel, PointCloud, ProjectionMaps};
use crate::scalar::Real;

pub const DEFAULT_TOP_K: usize = 300;

/// Spread of scores below which one global shift keeps every `exp` in range.
const FAST_PATH_SPREAD: f64 = 60.0;
/// Columns per work unit; fixed so reductions are order-deterministic.
const COLUMN_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch ({row}, {col}) is outside the {rows}x{cols} patch grid")]
    PatchOutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("malformed correspondence file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `N2D × N3D` similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T: Real> {
    values: DMatrix<T>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(values: DMatrix<T>) -> Result<Self, MatchError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    /// Dual-softmax assignment computed in place, reusing this buffer.
    pub fn into_assignment(mut self) -> AssignmentMatrix<T> {
        dual_softmax_in_place(&mut self.values);
        AssignmentMatrix { values: self.values }
    }
}

/// Soft assignment `P`, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<T: Real> {
    values: DMatrix<T>,
}

impl<T: Real> AssignmentMatrix<T> {
    /// Wraps externally computed assignment values, each in `[0, 1]`.
    pub fn from_values(values: DMatrix<T>) -> Result<Self, MatchError> {
        if values.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(MatchError::ShapeMismatch("assignment entries must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// A camera patch paired with a LiDAR patch, both as `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch<T: Real> {
    pub camera_patch: (usize, usize),
    pub lidar_patch: (usize, usize),
    pub score: T,
}

/// Top-1 pixel pair inside a patch pair; pixels are `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMatch<T: Real> {
    pub image_pixel: (usize, usize),
    pub lidar_pixel: (usize, usize),
    pub confidence: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    pub image_pixel: (usize, usize),
    pub lidar_pixel: (usize, usize),
    pub point: Vector3<T>,
    pub confidence: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet<T: Real> {
    pub items: Vec<Correspondence<T>>,
    /// Pixel matches discarded because their LiDAR pixel was empty.
    pub dropped: usize,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn points(&self) -> Vec<Vector3<T>> {
        self.items.iter().map(|c| c.point).collect()
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.items.iter().map(|c| c.image_pixel).collect()
    }
}

fn head_product<T: Real>(
    a: &DenseFeatures<T>,
    b: &DenseFeatures<T>,
    heads: &HeadPair<T>,
) -> Result<ScoreMatrix<T>, MatchError> {
    if a.dim() != b.dim() {
        return Err(MatchError::ShapeMismatch(format!(
            "camera features have {} channels, LiDAR features {}",
            a.dim(),
            b.dim()
        )));
    }
    let fc = heads.camera.apply(&a.to_matrix())?;
    let fl = heads.lidar.apply(&b.to_matrix())?;
    ScoreMatrix::new(fc * fl.transpose())
}

/// `S = (F_C·W_C)(F_L·W_L)ᵀ` over the patch-level features.
pub fn score_matrix<T: Real>(
    camera: &FeatureMaps<T>,
    lidar: &FeatureMaps<T>,
    heads: &HeadPair<T>,
) -> Result<ScoreMatrix<T>, MatchError> {
    head_product(camera.patch(), lidar.patch(), heads)
}

/// Dual-softmax of a score matrix, leaving `s` untouched.
pub fn soft_assignment<T: Real>(s: &ScoreMatrix<T>) -> AssignmentMatrix<T> {
    s.clone().into_assignment()
}

/// Replaces `m` with `softmax_row(m) ⊙ softmax_col(m)`.
fn dual_softmax_in_place<T: Real>(m: &mut DMatrix<T>) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return;
    }
    let (lo, hi) = m
        .iter()
        .fold((T::max_value().unwrap(), T::min_value().unwrap()), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if (hi - lo).as_f64() < FAST_PATH_SPREAD {
        // exp(s - hi) is at least e^-60 everywhere, so plain sums are safe.
        let block = rows * COLUMN_BLOCK;
        let partial_rows: Vec<(Vec<T>, Vec<T>)> = m
            .as_mut_slice()
            .par_chunks_mut(block)
            .map(|chunk| {
                let mut row_sum = vec![T::zero(); rows];
                let mut col_sum = Vec::with_capacity(COLUMN_BLOCK);
                for column in chunk.chunks_exact_mut(rows) {
                    let mut cs = T::zero();
                    for (i, x) in column.iter_mut().enumerate() {
                        *x = (*x - hi).exp();
                        row_sum[i] += *x;
                        cs += *x;
                    }
                    col_sum.push(cs);
                }
                (row_sum, col_sum)
            })
            .collect();
        let mut row_sum = vec![T::zero(); rows];
        let mut col_sum = Vec::with_capacity(cols);
        for (rs, cs) in &partial_rows {
            for (acc, x) in row_sum.iter_mut().zip(rs) {
                *acc += *x;
            }
            col_sum.extend_from_slice(cs);
        }
        m.as_mut_slice()
            .par_chunks_mut(rows)
            .zip(col_sum.par_iter())
            .for_each(|(column, cs)| {
                for (x, rs) in column.iter_mut().zip(&row_sum) {
                    *x = (*x / *rs) * (*x / *cs);
                }
            });
        return;
    }

    // Wide spread: shift each axis by its own maximum.
    let col_max: Vec<T> = m
        .as_slice()
        .par_chunks(rows)
        .map(|c| c.iter().fold(T::min_value().unwrap(), |a, b| a.max(*b)))
        .collect();
    let mut row_max = vec![T::min_value().unwrap(); rows];
    for column in m.as_slice().chunks_exact(rows) {
        for (acc, x) in row_max.iter_mut().zip(column) {
            *acc = acc.max(*x);
        }
    }
    let col_sum: Vec<T> = m
        .as_slice()
        .par_chunks(rows)
        .zip(col_max.par_iter())
        .map(|(c, cm)| c.iter().fold(T::zero(), |a, x| a + (*x - *cm).exp()))
        .collect();
    let partial: Vec<Vec<T>> = m
        .as_slice()
        .par_chunks(rows * COLUMN_BLOCK)
        .map(|chunk| {
            let mut rs = vec![T::zero(); rows];
            for column in chunk.chunks_exact(rows) {
                for ((acc, x), rm) in rs.iter_mut().zip(column).zip(&row_max) {
                    *acc += (*x - *rm).exp();
                }
            }
            rs
        })
        .collect();
    let mut row_sum = vec![T::zero(); rows];
    for rs in &partial {
        for (acc, x) in row_sum.iter_mut().zip(rs) {
            *acc += *x;
        }
    }
    m.as_mut_slice()
        .par_chunks_mut(rows)
        .zip(col_max.par_iter().zip(col_sum.par_iter()))
        .for_each(|(column, (cm, cs))| {
            for (i, x) in column.iter_mut().enumerate() {
                let r = (*x - row_max[i]).exp() / row_sum[i];
                let c = (*x - *cm).exp() / *cs;
                *x = r * c;
            }
        });
}

/// Heap entry ordered so that `a < b` means `a` ranks before `b`.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    value: f64,
    row: usize,
    col: usize,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .value
            .total_cmp(&self.value)
            .then(self.row.cmp(&other.row))
            .then(self.col.cmp(&other.col))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

fn push_bounded(heap: &mut BinaryHeap<Ranked>, k: usize, item: Ranked) {
    if heap.len() < k {
        heap.push(item);
    } else if let Some(worst) = heap.peek() {
        if item < *worst {
            heap.pop();
            heap.push(item);
        }
    }
}

/// Indices `(row, col)` and values of the `k` largest entries of `m`,
/// descending, ties by ascending `(row, col)`.
pub fn topk_entries<T: Real>(m: &DMatrix<T>, k: usize) -> Vec<(usize, usize, T)> {
    let rows = m.nrows();
    if k == 0 || m.is_empty() {
        return Vec::new();
    }
    let heaps: Vec<BinaryHeap<Ranked>> = m
        .as_slice()
        .par_chunks(rows * COLUMN_BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            let mut heap = BinaryHeap::with_capacity(k + 1);
            for (j, column) in chunk.chunks_exact(rows).enumerate() {
                let col = b * COLUMN_BLOCK + j;
                for (row, x) in column.iter().enumerate() {
                    push_bounded(
                        &mut heap,
                        k,
                        Ranked {
                            value: x.as_f64(),
                            row,
                            col,
                        },
                    );
                }
            }
            heap
        })
        .collect();
    let mut merged = BinaryHeap::with_capacity(k + 1);
    for heap in heaps {
        for item in heap {
            push_bounded(&mut merged, k, item);
        }
    }
    merged
        .into_sorted_vec()
        .into_iter()
        .map(|r| (r.row, r.col, m[(r.row, r.col)]))
        .collect()
}

/// Patch grid sizes `(rows, cols)` of the camera and LiDAR side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrids {
    pub camera: (usize, usize),
    pub lidar: (usize, usize),
}

impl PatchGrids {
    pub fn of<T: Real>(camera: &FeatureMaps<T>, lidar: &FeatureMaps<T>) -> Self {
        Self {
            camera: (camera.patch().height(), camera.patch().width()),
            lidar: (lidar.patch().height(), lidar.patch().width()),
        }
    }
}

/// The `k` best patch pairs of `p` over the whole matrix.
pub fn topk_patch_matches<T: Real>(p: &AssignmentMatrix<T>, k: usize, grids: PatchGrids) -> Vec<PatchMatch<T>> {
    let cw = grids.camera.1.max(1);
    let lw = grids.lidar.1.max(1);
    topk_entries(&p.values, k)
        .into_iter()
        .map(|(i, j, score)| PatchMatch {
            camera_patch: (i / cw, i % cw),
            lidar_patch: (j / lw, j % lw),
            score,
        })
        .collect()
}

/// How patch pairs are chosen before pixel refinement.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchSelection {
    TopK(usize),
    /// Training-mode bypass: use these `(camera_patch, lidar_patch)` pairs,
    /// each given as `(row, col)`, instead of top-k.
    Given(Vec<((usize, usize), (usize, usize))>),
}

pub fn select_patches<T: Real>(
    p: &AssignmentMatrix<T>,
    selection: &PatchSelection,
    grids: PatchGrids,
) -> Result<Vec<PatchMatch<T>>, MatchError> {
    match selection {
        PatchSelection::TopK(k) => Ok(topk_patch_matches(p, *k, grids)),
        PatchSelection::Given(pairs) => pairs
            .iter()
            .map(|&(c, l)| {
                check_patch(c, grids.camera)?;
                check_patch(l, grids.lidar)?;
                let score = p.values[(c.0 * grids.camera.1 + c.1, l.0 * grids.lidar.1 + l.1)];
                Ok(PatchMatch {
                    camera_patch: c,
                    lidar_patch: l,
                    score,
                })
            })
            .collect(),
    }
}

fn check_patch(p: (usize, usize), grid: (usize, usize)) -> Result<(), MatchError> {
    if p.0 >= grid.0 || p.1 >= grid.1 {
        return Err(MatchError::PatchOutOfBounds {
            row: p.0,
            col: p.1,
            rows: grid.0,
            cols: grid.1,
        });
    }
    Ok(())
}

/// 16×16 dual-softmax assignment between the pixel blocks of a camera patch
/// and a LiDAR patch, rows and columns in row-major order within the block.
pub fn block_assignment<T: Real>(
    camera_patch: (usize, usize),
    lidar_patch: (usize, usize),
    camera: &DenseFeatures<T>,
    lidar: &DenseFeatures<T>,
    heads: &HeadPair<T>,
) -> Result<AssignmentMatrix<T>, MatchError> {
    check_patch(camera_patch, (camera.height() / PATCH, camera.width() / PATCH))?;
    check_patch(lidar_patch, (lidar.height() / PATCH, lidar.width() / PATCH))?;
    if camera.dim() != lidar.dim() {
        return Err(MatchError::ShapeMismatch(format!(
            "camera pixel features have {} channels, LiDAR {}",
            camera.dim(),
            lidar.dim()
        )));
    }
    let fc = heads
        .camera
        .apply(&camera.block_matrix(camera_patch.1 * PATCH, camera_patch.0 * PATCH, PATCH))?;
    let fl = heads
        .lidar
        .apply(&lidar.block_matrix(lidar_patch.1 * PATCH, lidar_patch.0 * PATCH, PATCH))?;
    Ok(ScoreMatrix::new(fc * fl.transpose())?.into_assignment())
}

/// Top-1 pixel pair inside the two 4×4 blocks of a patch pair, scored by the
/// same score + dual-softmax pipeline as patches.
pub fn pixel_match_within_patch<T: Real>(
    m: &PatchMatch<T>,
    camera: &DenseFeatures<T>,
    lidar: &DenseFeatures<T>,
    heads: &HeadPair<T>,
) -> Result<PixelMatch<T>, MatchError> {
    let p = block_assignment(m.camera_patch, m.lidar_patch, camera, lidar, heads)?;
    let mut best = (0, 0);
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            if p.values[(i, j)] > p.values[best] {
                best = (i, j);
            }
        }
    }
    let (cu, cv) = (m.camera_patch.1 * PATCH, m.camera_patch.0 * PATCH);
    let (lu, lv) = (m.lidar_patch.1 * PATCH, m.lidar_patch.0 * PATCH);
    Ok(PixelMatch {
        image_pixel: (cu + best.0 % PATCH, cv + best.0 / PATCH),
        lidar_pixel: (lu + best.1 % PATCH, lv + best.1 / PATCH),
        confidence: p.values[best],
    })
}

/// Pixel refinement of every patch match, in input order.
pub fn pixel_matches<T: Real>(
    matches: &[PatchMatch<T>],
    camera: &DenseFeatures<T>,
    lidar: &DenseFeatures<T>,
    heads: &HeadPair<T>,
) -> Result<Vec<PixelMatch<T>>, MatchError> {
    matches
        .par_iter()
        .map(|m| pixel_match_within_patch(m, camera, lidar, heads))
        .collect()
}

/// Attaches the 3D point behind each LiDAR pixel; matches on empty pixels
/// are dropped and counted.
pub fn build_correspondences<T: Real>(
    matches: &[PixelMatch<T>],
    maps: &ProjectionMaps<T>,
    cloud: &PointCloud<T>,
) -> Result<CorrespondenceSet<T>, MatchError> {
    let mut out = CorrespondenceSet {
        items: Vec::with_capacity(matches.len()),
        dropped: 0,
    };
    for m in matches {
        let (u, v) = m.lidar_pixel;
        if u >= maps.width() || v >= maps.height() || !maps.is_occupied(u, v) {
            out.dropped += 1;
            continue;
        }
        let (point, _) =
            unproject_pixel(maps, cloud, u, v).map_err(|e| MatchError::ShapeMismatch(e.to_string()))?;
        out.items.push(Correspondence {
            image_pixel: m.image_pixel,
            lidar_pixel: m.lidar_pixel,
            point,
            confidence: m.confidence,
        });
    }
    Ok(out)
}

/// Pixel-level heads and patch-level heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHeads<T: Real> {
    pub patch: HeadPair<T>,
    pub pixel: HeadPair<T>,
}

impl<T: Real> MatchHeads<T> {
    pub fn identity(d_patch: usize, d_pixel: usize) -> Self {
        Self {
            patch: HeadPair::identity(d_patch),
            pixel: HeadPair::identity(d_pixel),
        }
    }

    pub fn identity_for(features: &FeatureMaps<T>) -> Self {
        Self::identity(features.patch().dim(), features.pixel().dim())
    }
}

/// Coarse-to-fine output before 3D lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput<T: Real> {
    pub patch_matches: Vec<PatchMatch<T>>,
    pub pixel_matches: Vec<PixelMatch<T>>,
}

/// Patch assignment of two feature maps.
pub fn patch_assignment<T: Real>(
    camera: &FeatureMaps<T>,
    lidar: &FeatureMaps<T>,
    heads: &MatchHeads<T>,
) -> Result<AssignmentMatrix<T>, MatchError> {
    Ok(score_matrix(camera, lidar, &heads.patch)?.into_assignment())
}

/// Patch selection followed by pixel refinement on a precomputed assignment.
pub fn refine<T: Real>(
    p: &AssignmentMatrix<T>,
    camera: &FeatureMaps<T>,
    lidar: &FeatureMaps<T>,
    heads: &MatchHeads<T>,
    selection: &PatchSelection,
) -> Result<MatchOutput<T>, MatchError> {
    let patch_matches = select_patches(p, selection, PatchGrids::of(camera, lidar))?;
    let pixel_matches = pixel_matches(&patch_matches, camera.pixel(), lidar.pixel(), &heads.pixel)?;
    Ok(MatchOutput {
        patch_matches,
        pixel_matches,
    })
}

/// Full matching: scores, assignment, patch selection, pixel refinement.
pub fn match_features<T: Real>(
    camera: &FeatureMaps<T>,
    lidar: &FeatureMaps<T>,
    heads: &MatchHeads<T>,
    selection: &PatchSelection,
) -> Result<MatchOutput<T>, MatchError> {
    let p = patch_assignment(camera, lidar, heads)?;
    refine(&p, camera, lidar, heads, selection)
}

pub const CSV_HEADER: &str = "u_img,v_img,u_map,v_map,x,y,z,confidence";

pub fn write_correspondences_csv<T: Real>(out: &mut impl Write, set: &CorrespondenceSet<T>) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for c in &set.items {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.image_pixel.0,
            c.image_pixel.1,
            c.lidar_pixel.0,
            c.lidar_pixel.1,
            c.point.x.as_f64(),
            c.point.y.as_f64(),
            c.point.z.as_f64(),
            c.confidence.as_f64()
        )?;
    }
    Ok(())
}

pub fn read_correspondences_csv<T: Real>(input: impl BufRead) -> Result<CorrespondenceSet<T>, MatchError> {
    let mut set = CorrespondenceSet::default();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if n == 0 {
            if line != CSV_HEADER {
                return Err(MatchError::Format(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(MatchError::Format(format!("line {}: expected 8 fields", n + 1)));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| MatchError::Format(format!("line {}: {e}", n + 1)));
        let real = |s: &str| {
            s.parse::<f64>()
                .map(T::lit)
                .map_err(|e| MatchError::Format(format!("line {}: {e}", n + 1)))
        };
        set.items.push(Correspondence {
            image_pixel: (int(f[0])?, int(f[1])?),
            lidar_pixel: (int(f[2])?, int(f[3])?),
            point: Vector3::new(real(f[4])?, real(f[5])?, real(f[6])?),
            confidence: real(f[7])?,
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureSource, LinearHead};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    }

    fn dense(w: usize, h: usize, d: usize, data: Vec<f64>) -> DenseFeatures<f64> {
        DenseFeatures::from_vec(w, h, d, data).unwrap()
    }

    fn maps_from(patch: DenseFeatures<f64>) -> FeatureMaps<f64> {
        let (w, h, d) = (patch.width(), patch.height(), patch.dim());
        let mut px = vec![0.0; w * h * 16 * d];
        px.chunks_exact_mut(d).for_each(|c| c[0] = 1.0);
        FeatureMaps::new(patch, dense(w * 4, h * 4, d, px), FeatureSource::External).unwrap()
    }

    /// Naive oracle of the dual softmax straight from its definition.
    fn naive_dual_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
        let (r, c) = s.shape();
        DMatrix::from_fn(r, c, |i, j| {
            let col: f64 = (0..r).map(|k| s[(k, j)].exp()).sum();
            let row: f64 = (0..c).map(|k| s[(i, k)].exp()).sum();
            s[(i, j)].exp() / col * s[(i, j)].exp() / row
        })
    }

    #[test]
    fn score_matrix_examples() {
        let one = maps_from(dense(1, 1, 2, vec![0.6, 0.8]));
        let s = score_matrix(&one, &one, &HeadPair::identity(2)).unwrap();
        assert_relative_eq!(s.values()[(0, 0)], 1.0, epsilon = 1e-12);

        let eye = maps_from(dense(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let s = score_matrix(&eye, &eye, &HeadPair::identity(2)).unwrap();
        assert_eq!(s.values(), &DMatrix::identity(2, 2));

        let bad = maps_from(dense(1, 1, 3, vec![1.0, 0.0, 0.0]));
        assert!(matches!(
            score_matrix(&one, &bad, &HeadPair::identity(2)),
            Err(MatchError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn score_matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        let a = maps_from(dense(2, 3, d, unit_rows(6, d, &mut rng)));
        let b = maps_from(dense(2, 3, d, unit_rows(6, d, &mut rng)));
        let wc = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let wl = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let heads = HeadPair {
            camera: LinearHead::new(wc.clone()).unwrap(),
            lidar: LinearHead::new(wl.clone()).unwrap(),
        };
        let s = score_matrix(&a, &b, &heads).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (ai, bj) = (a.patch().get(i % 2, i / 2), b.patch().get(j % 2, j / 2));
                let mut dot = 0.0;
                for c in 0..d {
                    let x: f64 = (0..d).map(|k| ai[k] * wc[(k, c)]).sum();
                    let y: f64 = (0..d).map(|k| bj[k] * wl[(k, c)]).sum();
                    dot += x * y;
                }
                assert_relative_eq!(s.values()[(i, j)], dot, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn soft_assignment_examples() {
        let p = soft_assignment(&ScoreMatrix::new(DMatrix::<f64>::zeros(2, 2)).unwrap());
        assert!(p.values().iter().all(|v| (*v - 0.25f64).abs() < 1e-15));
        let p = soft_assignment(&ScoreMatrix::new(DMatrix::from_element(1, 1, 3.0)).unwrap());
        assert_eq!(p.values()[(0, 0)], 1.0);
        let l = 2f64.ln();
        let p = soft_assignment(&ScoreMatrix::new(DMatrix::from_row_slice(2, 2, &[l, 0.0, 0.0, l])).unwrap());
        let expected = [4.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 4.0 / 9.0];
        for (v, e) in p.values().transpose().iter().zip(expected) {
            assert_relative_eq!(*v, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn wide_spread_path_agrees_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = DMatrix::from_fn(7, 130, |_, _| rng.random_range(-40.0..40.0));
        let p = soft_assignment(&ScoreMatrix::new(s.clone()).unwrap());
        let q = naive_dual_softmax(&s);
        for (a, b) in p.values().iter().zip(q.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12, max_relative = 1e-9);
        }
        // Beyond exp's range the naive form overflows but the stable one does not.
        let big = ScoreMatrix::new(s.map(|x| x * 30.0)).unwrap();
        assert!(soft_assignment(&big).values().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn topk_examples() {
        let p = ScoreMatrix::new(DMatrix::from_element(1, 1, 0.0)).unwrap().into_assignment();
        let grids = PatchGrids {
            camera: (1, 1),
            lidar: (1, 1),
        };
        let m = topk_patch_matches(&p, 1, grids);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].camera_patch, m[0].lidar_patch, m[0].score), ((0, 0), (0, 0), 1.0));
        assert_eq!(topk_patch_matches(&p, 10, grids).len(), 1);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = DMatrix::from_fn(10, 10, |_, _| rng.random_range(-2.0..2.0));
        let p = soft_assignment(&ScoreMatrix::new(s).unwrap());
        let mut all: Vec<(f64, usize, usize)> = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .map(|(i, j)| (p.values()[(i, j)], i, j))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let top = topk_entries(p.values(), 5);
        let expected: Vec<_> = all[..5].iter().map(|&(v, i, j)| (i, j, v)).collect();
        assert_eq!(top, expected);
        let every = topk_entries(p.values(), 100);
        assert_eq!(every.len(), 100);
        assert_eq!(every, all.iter().map(|&(v, i, j)| (i, j, v)).collect::<Vec<_>>());
    }

    #[test]
    fn topk_breaks_ties_lexicographically() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 2.0, 2.0, 0.0, 2.0]);
        let top = topk_entries(&m, 3);
        assert_eq!(top, vec![(0, 1, 2.0), (0, 2, 2.0), (1, 0, 2.0)]);
        // Across column blocks too.
        let m = DMatrix::from_element(3, 200, 1.0);
        let top = topk_entries(&m, 4);
        assert_eq!(top.iter().map(|t| (t.0, t.1)).collect::<Vec<_>>(), vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn patch_indices_are_row_major() {
        let mut s = DMatrix::zeros(6, 8);
        s[(5, 6)] = 10.0;
        let p = soft_assignment(&ScoreMatrix::new(s).unwrap());
        let grids = PatchGrids {
            camera: (2, 3),
            lidar: (2, 4),
        };
        let m = topk_patch_matches(&p, 1, grids);
        assert_eq!((m[0].camera_patch, m[0].lidar_patch), ((1, 2), (1, 2)));
    }

    #[test]
    fn given_selection_bypasses_topk() {
        let s = DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 5.0]);
        let p = soft_assignment(&ScoreMatrix::new(s).unwrap());
        let grids = PatchGrids {
            camera: (1, 2),
            lidar: (1, 2),
        };
        let sel = PatchSelection::Given(vec![((0, 0), (0, 1))]);
        let m = select_patches(&p, &sel, grids).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].lidar_patch, (0, 1));
        assert_eq!(m[0].score, p.values()[(0, 1)]);
        let bad = PatchSelection::Given(vec![((0, 2), (0, 0))]);
        assert!(select_patches(&p, &bad, grids).is_err());
    }

    #[test]
    fn pixel_match_uniform_blocks_pick_first_pixel() {
        let f = dense(8, 4, 2, [1.0, 0.0].repeat(32));
        let m = PatchMatch {
            camera_patch: (0, 1),
            lidar_patch: (0, 0),
            score: 1.0,
        };
        let px = pixel_match_within_patch(&m, &f, &f, &HeadPair::identity(2)).unwrap();
        assert_eq!((px.image_pixel, px.lidar_pixel), ((4, 0), (0, 0)));
        assert_relative_eq!(px.confidence, 1.0 / 256.0, epsilon = 1e-15);
    }

    #[test]
    fn pixel_match_finds_distinctive_pair() {
        let d = 33;
        // Camera pixel k gets basis k, LiDAR pixel k basis 16 + k; camera
        // pixel (2,1) and LiDAR pixel (3,3) share basis 32 instead.
        let mut cam = vec![0.0; 16 * d];
        let mut lid = vec![0.0; 16 * d];
        for k in 0..16 {
            cam[k * d + k] = 1.0;
            lid[k * d + 16 + k] = 1.0;
        }
        let ck = 4 + 2;
        let lk = 3 * 4 + 3;
        cam[ck * d..(ck + 1) * d].fill(0.0);
        lid[lk * d..(lk + 1) * d].fill(0.0);
        cam[ck * d + 32] = 1.0;
        lid[lk * d + 32] = 1.0;
        let fc = dense(4, 4, d, cam);
        let fl = dense(4, 4, d, lid);
        let m = PatchMatch {
            camera_patch: (0, 0),
            lidar_patch: (0, 0),
            score: 0.5,
        };
        let px = pixel_match_within_patch(&m, &fc, &fl, &HeadPair::identity(d)).unwrap();
        assert_eq!((px.image_pixel, px.lidar_pixel), ((2, 1), (3, 3)));
    }

    #[test]
    fn pixel_match_agrees_with_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let fc = dense(8, 8, d, unit_rows(64, d, &mut rng));
        let fl = dense(8, 8, d, unit_rows(64, d, &mut rng));
        for (cp, lp) in [((0, 0), (1, 1)), ((1, 0), (0, 1))] {
            let m = PatchMatch {
                camera_patch: cp,
                lidar_patch: lp,
                score: 0.0,
            };
            let got = pixel_match_within_patch(&m, &fc, &fl, &HeadPair::identity(d)).unwrap();
            let mut s = DMatrix::zeros(16, 16);
            for i in 0..16 {
                for j in 0..16 {
                    let a = fc.get(cp.1 * 4 + i % 4, cp.0 * 4 + i / 4);
                    let b = fl.get(lp.1 * 4 + j % 4, lp.0 * 4 + j / 4);
                    s[(i, j)] = a.iter().zip(b).map(|(x, y)| x * y).sum();
                }
            }
            let p = naive_dual_softmax(&s);
            let (mut bi, mut bj) = (0, 0);
            for i in 0..16 {
                for j in 0..16 {
                    if p[(i, j)] > p[(bi, bj)] {
                        (bi, bj) = (i, j);
                    }
                }
            }
            assert_eq!(got.image_pixel, (cp.1 * 4 + bi % 4, cp.0 * 4 + bi / 4));
            assert_eq!(got.lidar_pixel, (lp.1 * 4 + bj % 4, lp.0 * 4 + bj / 4));
            assert_relative_eq!(got.confidence, p[(bi, bj)], epsilon = 1e-12);
        }
    }

    #[test]
    fn correspondences_drop_empty_pixels() {
        use crate::projection::{project_to_maps, LidarPoint, ProjectionConfig};
        let cfg = ProjectionConfig {
            width: 8,
            height: 4,
            ..ProjectionConfig::kitti()
        };
        let cloud = PointCloud::new(
            vec![LidarPoint::new(5.0, 0.0, 0.0, 0.3), LidarPoint::new(-5.0, 0.1, 0.0, 0.3)],
            Some(vec![1, 2]),
        )
        .unwrap();
        let maps = project_to_maps(&cloud, &cfg).unwrap();
        let occupied: Vec<_> = maps.occupied_pixels().collect();
        assert_eq!(occupied.len(), 2);
        let mk = |u, v| PixelMatch {
            image_pixel: (1, 1),
            lidar_pixel: (u, v),
            confidence: 0.5,
        };
        let (u0, v0, i0) = occupied[0];
        let all = [mk(u0, v0), mk(occupied[1].0, occupied[1].1)];
        let set = build_correspondences(&all, &maps, &cloud).unwrap();
        assert_eq!((set.len(), set.dropped), (2, 0));
        assert_eq!(set.items[0].point, cloud.point(i0).position);
        let empty = (0..8).flat_map(|u| (0..4).map(move |v| (u, v))).find(|&(u, v)| !maps.is_occupied(u, v)).unwrap();
        let set = build_correspondences(&[all[0], mk(empty.0, empty.1)], &maps, &cloud).unwrap();
        assert_eq!((set.len(), set.dropped), (1, 1));
    }

    #[test]
    fn csv_roundtrip() {
        let set = CorrespondenceSet {
            items: vec![Correspondence {
                image_pixel: (3, 4),
                lidar_pixel: (10, 2),
                point: Vector3::new(1.5, -2.25, 0.1),
                confidence: 0.123456789,
            }],
            dropped: 0,
        };
        let mut buf = Vec::new();
        write_correspondences_csv(&mut buf, &set).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let back: CorrespondenceSet<f64> = read_correspondences_csv(&buf[..]).unwrap();
        assert_eq!(back, set);
        assert!(read_correspondences_csv::<f64>(&b"bad\n"[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shift_invariance_and_domination(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            c in -50.0f64..50.0,
        ) {
            let s = DMatrix::from_row_slice(3, 4, &vals);
            let p = soft_assignment(&ScoreMatrix::new(s.clone()).unwrap());
            let q = soft_assignment(&ScoreMatrix::new(s.add_scalar(c)).unwrap());
            for (a, b) in p.values().iter().zip(q.values().iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for i in 0..3 {
                for j in 0..4 {
                    let row: f64 = (0..4).map(|k| (s[(i, k)] - s[(i, j)]).exp()).sum();
                    let col: f64 = (0..3).map(|k| (s[(k, j)] - s[(i, j)]).exp()).sum();
                    let v = p.values()[(i, j)];
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!(v <= 1.0 / row + 1e-15 && v <= 1.0 / col + 1e-15);
                }
            }
        }

        #[test]
        fn topk_is_row_permutation_equivariant(
            vals in prop::collection::vec(0.0f64..1.0, 20),
            seed in 0u64..1000,
        ) {
            let s = DMatrix::from_row_slice(4, 5, &vals);
            let mut perm: Vec<usize> = (0..4).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Row i of the permuted matrix is row perm[i] of the original.
            let t = DMatrix::from_fn(4, 5, |i, j| s[(perm[i], j)]);
            let a = topk_entries(&s, 20);
            let b = topk_entries(&t, 20);
            let mut mapped: Vec<(usize, usize, f64)> =
                b.iter().map(|&(i, j, v)| (perm[i], j, v)).collect();
            mapped.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
            prop_assert_eq!(a, mapped);
        }
    }
}
