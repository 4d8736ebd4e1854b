//! Two-scale dense feature maps and the built-in handcrafted extractor.
//!
//! A [`FeatureMaps`] holds a pixel-level map at full resolution and a
//! patch-level map at 1/4 resolution; each patch covers a 4×4 pixel block.
//! Every stored vector is unit-norm, or exactly zero for masked locations.
//!
//! The built-in descriptor stands in for a learned encoder so that the
//! pipeline can run self-contained. Features produced elsewhere (e.g. by a
//! trained network) are loaded from PPRT files with [`load_features`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataio::tensor::{self, Tensor, TensorError};
use crate::grid::Grid;
use crate::projection::{ProjectionConfig, ProjectionMaps};
use crate::scalar::Real;

/// Side of the pixel block covered by one patch.
pub const PATCH: usize = 4;
pub const DEFAULT_D_PATCH: usize = 64;
pub const DEFAULT_D_PIXEL: usize = 32;

/// Gradient orientation bins per scale.
const ORIENTATION_BINS: usize = 8;
/// Window radii of the three descriptor scales.
const SCALES: [usize; 3] = [1, 2, 4];
const CHANNELS_PER_SCALE: usize = 1 + ORIENTATION_BINS;
/// Length of the raw built-in descriptor before padding/truncation.
pub const BUILTIN_RAW_DIM: usize = CHANNELS_PER_SCALE * SCALES.len();

/// Norm deviation above which loading counts a vector as repaired.
pub const LOAD_WARN_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image of {width}x{height} is not divisible by 4")]
    BadShape { width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature vector at ({u}, {v}) is not unit-norm (norm {norm})")]
    NotUnitNorm { u: usize, v: usize, norm: f64 },
    #[error("zero feature vector at valid location ({u}, {v})")]
    NormError { u: usize, v: usize },
    #[error("non-finite feature or head weight")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Builtin,
    External,
    /// Ideal features constructed alongside a synthetic scene.
    Synthetic,
}

/// `height × width × dim` array, one descriptor per location, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatures<T: Real> {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> DenseFeatures<T> {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![T::zero(); width * height * dim],
        }
    }

    pub fn from_vec(width: usize, height: usize, dim: usize, data: Vec<T>) -> Result<Self, FeatureError> {
        if data.len() != width * height * dim {
            return Err(FeatureError::ShapeMismatch(format!(
                "{} values for {height}x{width}x{dim}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &[T] {
        let start = (v * self.width + u) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut [T] {
        let start = (v * self.width + u) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Flattened `N × dim` matrix, rows in row-major location order
    /// (`row · width + col`).
    pub fn to_matrix(&self) -> DMatrix<T> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    /// `side² × dim` matrix of the `side × side` block whose top-left
    /// location is `(u0, v0)`, rows in row-major order within the block.
    pub fn block_matrix(&self, u0: usize, v0: usize, side: usize) -> DMatrix<T> {
        let mut m = DMatrix::zeros(side * side, self.dim);
        for dy in 0..side {
            for dx in 0..side {
                let f = self.get(u0 + dx, v0 + dy);
                for (c, x) in f.iter().enumerate() {
                    m[(dy * side + dx, c)] = *x;
                }
            }
        }
        m
    }

    pub fn norm_at(&self, u: usize, v: usize) -> T {
        self.get(u, v).iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
    }

    /// Scales every non-zero vector to unit length.
    pub fn normalize(&mut self) {
        for chunk in self.data.chunks_exact_mut(self.dim.max(1)) {
            normalize_in_place(chunk);
        }
    }

    /// Sets the vector at every location where `keep` is false to zero.
    pub fn apply_mask(&mut self, keep: &Grid<bool>) {
        for v in 0..self.height {
            for u in 0..self.width {
                if !*keep.get(u, v) {
                    self.get_mut(u, v).iter_mut().for_each(|x| *x = T::zero());
                }
            }
        }
    }

    /// Average over `factor × factor` blocks, re-normalized.
    pub fn pooled(&self, factor: usize) -> Self {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Self::zeros(w, h, self.dim);
        let inv = T::one() / T::from_usize_lossy(factor * factor);
        for pv in 0..h {
            for pu in 0..w {
                let dst = out.get_mut(pu, pv);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = &self.data[((pv * factor + dy) * self.width + pu * factor + dx) * self.dim..][..self.dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s * inv;
                        }
                    }
                }
                normalize_in_place(dst);
            }
        }
        out
    }

    /// Pads with zeros or truncates each vector to `dim`, then re-normalizes.
    pub fn resized(&self, dim: usize) -> Self {
        let mut out = Self::zeros(self.width, self.height, dim);
        let n = dim.min(self.dim);
        for (dst, src) in out.data.chunks_exact_mut(dim.max(1)).zip(self.data.chunks_exact(self.dim.max(1))) {
            dst[..n].copy_from_slice(&src[..n]);
            normalize_in_place(dst);
        }
        out
    }

    /// Channel-wise concatenation of two equally shaped maps, re-normalized.
    pub fn concat(a: &Self, b: &Self) -> Result<Self, FeatureError> {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(FeatureError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
        let dim = a.dim + b.dim;
        let mut data = Vec::with_capacity(a.len() * dim);
        for (fa, fb) in a.data.chunks_exact(a.dim.max(1)).zip(b.data.chunks_exact(b.dim.max(1))) {
            data.extend_from_slice(&fa[..a.dim]);
            data.extend_from_slice(&fb[..b.dim]);
        }
        let mut out = Self::from_vec(a.width, a.height, dim, data)?;
        out.normalize();
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> DenseFeatures<U> {
        DenseFeatures {
            width: self.width,
            height: self.height,
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check_unit(&self) -> Result<(), FeatureError> {
        for v in 0..self.height {
            for u in 0..self.width {
                let f = self.get(u, v);
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(FeatureError::NonFinite);
                }
                let n = self.norm_at(u, v).as_f64();
                if n != 0.0 && (n - 1.0).abs() > T::UNIT_NORM_TOL {
                    return Err(FeatureError::NotUnitNorm { u, v, norm: n });
                }
            }
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.dim],
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
        .expect("consistent dims")
    }
}

fn normalize_in_place<T: Real>(v: &mut [T]) {
    let n = v.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Patch-level and pixel-level features of one image or projection map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps<T: Real> {
    patch: DenseFeatures<T>,
    pixel: DenseFeatures<T>,
    source: FeatureSource,
}

impl<T: Real> FeatureMaps<T> {
    pub fn new(patch: DenseFeatures<T>, pixel: DenseFeatures<T>, source: FeatureSource) -> Result<Self, FeatureError> {
        if !pixel.width.is_multiple_of(PATCH) || !pixel.height.is_multiple_of(PATCH) {
            return Err(FeatureError::BadShape {
                width: pixel.width,
                height: pixel.height,
            });
        }
        if patch.width * PATCH != pixel.width || patch.height * PATCH != pixel.height {
            return Err(FeatureError::ShapeMismatch(format!(
                "patch grid {}x{} does not match pixel grid {}x{} / 4",
                patch.height, patch.width, pixel.height, pixel.width
            )));
        }
        patch.check_unit()?;
        pixel.check_unit()?;
        Ok(Self { patch, pixel, source })
    }

    pub fn patch(&self) -> &DenseFeatures<T> {
        &self.patch
    }

    pub fn pixel(&self) -> &DenseFeatures<T> {
        &self.pixel
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn cast<U: Real>(&self) -> FeatureMaps<U> {
        let mut patch = self.patch.cast();
        let mut pixel = self.pixel.cast();
        patch.normalize();
        pixel.normalize();
        FeatureMaps {
            patch,
            pixel,
            source: self.source,
        }
    }
}

/// Learned linear projection applied to features before scoring, `f ↦ f·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T: Real> {
    weight: DMatrix<T>,
}

impl<T: Real> LinearHead<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(dim, dim),
        }
    }

    pub fn new(weight: DMatrix<T>) -> Result<Self, FeatureError> {
        if weight.nrows() != weight.ncols() {
            return Err(FeatureError::ShapeMismatch(format!(
                "head weight must be square, got {}x{}",
                weight.nrows(),
                weight.ncols()
            )));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { weight })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &DMatrix<T> {
        &self.weight
    }

    /// `features · W` for a row-per-location feature matrix.
    pub fn apply(&self, features: &DMatrix<T>) -> Result<DMatrix<T>, FeatureError> {
        if features.ncols() != self.dim() {
            return Err(FeatureError::ShapeMismatch(format!(
                "features have {} channels, head expects {}",
                features.ncols(),
                self.dim()
            )));
        }
        Ok(features * &self.weight)
    }
}

/// Camera-side and LiDAR-side heads (independent weights).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair<T: Real> {
    pub camera: LinearHead<T>,
    pub lidar: LinearHead<T>,
}

impl<T: Real> HeadPair<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            camera: LinearHead::identity(dim),
            lidar: LinearHead::identity(dim),
        }
    }
}

/// Converts an 8-bit RGB image to ITU-R 601 luma in `[0, 1]`.
pub fn luma<T: Real>(rgb: &image::RgbImage) -> Grid<T> {
    Grid::from_fn(rgb.width() as usize, rgb.height() as usize, |u, v| {
        let p = rgb.get_pixel(u as u32, v as u32).0;
        let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
        T::lit(y / 255.0)
    })
}

/// Summed-area table over a replicate-padded channel.
struct Integral {
    stride: usize,
    pad: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(width: usize, height: usize, pad: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let pw = width + 2 * pad;
        let ph = height + 2 * pad;
        let stride = pw + 1;
        let mut sums = vec![0.0; stride * (ph + 1)];
        for y in 0..ph {
            let sv = (y as isize - pad as isize).clamp(0, height as isize - 1) as usize;
            let mut row = 0.0;
            for x in 0..pw {
                let su = (x as isize - pad as isize).clamp(0, width as isize - 1) as usize;
                row += value(su, sv);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, pad, sums }
    }

    /// Mean over the `(2r+1)²` window centered on `(u, v)`.
    fn window_mean(&self, u: usize, v: usize, r: usize) -> f64 {
        let x0 = u + self.pad - r;
        let y0 = v + self.pad - r;
        let x1 = u + self.pad + r + 1;
        let y1 = v + self.pad + r + 1;
        let s = self.sums[y1 * self.stride + x1] - self.sums[y0 * self.stride + x1] - self.sums[y1 * self.stride + x0]
            + self.sums[y0 * self.stride + x0];
        s / ((2 * r + 1) * (2 * r + 1)) as f64
    }
}

/// Raw per-pixel descriptor: for each window radius in {1, 2, 4}, the mean
/// intensity followed by an 8-bin gradient-orientation histogram weighted by
/// gradient magnitude (window mean). Bin `b` covers orientations
/// `[b·45°, (b+1)·45°)` with 0° pointing along +u.
fn raw_descriptors<T: Real>(image: &Grid<T>) -> DenseFeatures<T> {
    let (w, h) = (image.width(), image.height());
    let at = |u: isize, v: isize| image.clamped(u, v).as_f64();
    let mut mag = vec![0.0; w * h];
    let mut bin = vec![0usize; w * h];
    for v in 0..h {
        for u in 0..w {
            let (ui, vi) = (u as isize, v as isize);
            let gx = 0.5 * (at(ui + 1, vi) - at(ui - 1, vi));
            let gy = 0.5 * (at(ui, vi + 1) - at(ui, vi - 1));
            let m = gx.hypot(gy);
            let k = v * w + u;
            mag[k] = m;
            if m > 0.0 {
                let a = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                bin[k] = ((a / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            }
        }
    }
    let pad = SCALES[SCALES.len() - 1];
    let intensity = Integral::new(w, h, pad, |u, v| image.get(u, v).as_f64());
    let hist: Vec<Integral> = (0..ORIENTATION_BINS)
        .map(|b| {
            Integral::new(w, h, pad, |u, v| {
                let k = v * w + u;
                if bin[k] == b {
                    mag[k]
                } else {
                    0.0
                }
            })
        })
        .collect();

    let mut out = DenseFeatures::zeros(w, h, BUILTIN_RAW_DIM);
    for v in 0..h {
        for u in 0..w {
            let f = out.get_mut(u, v);
            for (s, &r) in SCALES.iter().enumerate() {
                let base = s * CHANNELS_PER_SCALE;
                f[base] = T::lit(intensity.window_mean(u, v, r));
                for (b, integral) in hist.iter().enumerate() {
                    f[base + 1 + b] = T::lit(integral.window_mean(u, v, r));
                }
            }
            normalize_in_place(f);
        }
    }
    out
}

fn check_divisible(width: usize, height: usize) -> Result<(), FeatureError> {
    if width == 0 || height == 0 || !width.is_multiple_of(PATCH) || !height.is_multiple_of(PATCH) {
        return Err(FeatureError::BadShape { width, height });
    }
    Ok(())
}

/// Deterministic handcrafted two-scale features of a single-channel image.
///
/// Pixel features are the raw descriptor padded or truncated to `d_pixel`;
/// patch features are 4×4 averages of the raw descriptor, padded or
/// truncated to `d_patch`. All vectors are re-normalized.
pub fn extract_builtin<T: Real>(image: &Grid<T>, d_patch: usize, d_pixel: usize) -> Result<FeatureMaps<T>, FeatureError> {
    check_divisible(image.width(), image.height())?;
    let raw = raw_descriptors(image);
    let pixel = raw.resized(d_pixel);
    let patch = raw.pooled(PATCH).resized(d_patch);
    Ok(FeatureMaps {
        patch,
        pixel,
        source: FeatureSource::Builtin,
    })
}

/// Built-in extraction on two co-registered maps, `⌈d/2⌉` channels from the
/// first and `⌊d/2⌋` from the second, concatenated and re-normalized.
pub fn extract_dual_branch<T: Real>(
    range: &Grid<T>,
    reflectance: &Grid<T>,
    d_patch: usize,
    d_pixel: usize,
) -> Result<FeatureMaps<T>, FeatureError> {
    if (range.width(), range.height()) != (reflectance.width(), reflectance.height()) {
        return Err(FeatureError::ShapeMismatch(format!(
            "range map {}x{} vs reflectance map {}x{}",
            range.height(),
            range.width(),
            reflectance.height(),
            reflectance.width()
        )));
    }
    let a = extract_builtin(range, d_patch - d_patch / 2, d_pixel - d_pixel / 2)?;
    let b = extract_builtin(reflectance, d_patch / 2, d_pixel / 2)?;
    Ok(FeatureMaps {
        patch: DenseFeatures::concat(&a.patch, &b.patch)?,
        pixel: DenseFeatures::concat(&a.pixel, &b.pixel)?,
        source: FeatureSource::Builtin,
    })
}

/// Dual-branch built-in features of projection maps. Range is scaled by
/// `cfg.range_max`, reflectance clamped to `[0, 1]`; empty cells read as 0
/// and receive zero pixel features, as do patches with no occupied cell.
pub fn extract_lidar<T: Real>(
    maps: &ProjectionMaps<T>,
    cfg: &ProjectionConfig,
    d_patch: usize,
    d_pixel: usize,
) -> Result<FeatureMaps<T>, FeatureError> {
    let scale = T::lit(cfg.range_max);
    let range = maps.range().map(|r| if *r >= T::zero() { *r / scale } else { T::zero() });
    let refl = maps
        .reflectance()
        .map(|r| if *r >= T::zero() { r.clamp(T::zero(), T::one()) } else { T::zero() });
    let mut feats = extract_dual_branch(&range, &refl, d_patch, d_pixel)?;
    let occ = maps.occupancy();
    feats.pixel.apply_mask(&occ);
    let patch_occ = Grid::from_fn(occ.width() / PATCH, occ.height() / PATCH, |pu, pv| {
        (0..PATCH * PATCH).any(|k| *occ.get(pu * PATCH + k % PATCH, pv * PATCH + k / PATCH))
    });
    feats.patch.apply_mask(&patch_occ);
    Ok(feats)
}

/// Writes the patch tensor `[Hp, Wp, Dp]` followed by the pixel tensor
/// `[H, W, Dx]` into one PPRT file.
pub fn save_features<T: Real>(path: &Path, feats: &FeatureMaps<T>) -> Result<(), FeatureError> {
    tensor::save_tensors(path, &[feats.patch.to_tensor(), feats.pixel.to_tensor()])?;
    Ok(())
}

/// Outcome of a feature load: the maps and how many vectors were repaired.
#[derive(Debug, Clone)]
pub struct LoadedFeatures<T: Real> {
    pub features: FeatureMaps<T>,
    /// Vectors whose norm deviated from 1 by more than [`LOAD_WARN_TOL`].
    pub renormalized: usize,
}

/// Loads features written by [`save_features`] or an external tool.
pub fn load_features<T: Real>(path: &Path) -> Result<LoadedFeatures<T>, FeatureError> {
    load_features_masked(path, None)
}

/// Like [`load_features`]; when `valid` (pixel-grid occupancy) is given, a
/// zero pixel vector at a valid location is a [`FeatureError::NormError`].
pub fn load_features_masked<T: Real>(path: &Path, valid: Option<&Grid<bool>>) -> Result<LoadedFeatures<T>, FeatureError> {
    let tensors = tensor::load_tensors(path)?;
    let [patch_t, pixel_t] = <[Tensor; 2]>::try_from(tensors)
        .map_err(|t| TensorError::Format(format!("expected 2 tensors (patch, pixel), found {}", t.len())))?;
    let mut renormalized = 0;
    let mut patch = dense_from_tensor::<T>(patch_t, &mut renormalized)?;
    let mut pixel = dense_from_tensor::<T>(pixel_t, &mut renormalized)?;
    if let Some(valid) = valid {
        if (valid.width(), valid.height()) != (pixel.width, pixel.height) {
            return Err(FeatureError::ShapeMismatch("occupancy grid does not match pixel features".into()));
        }
        for v in 0..pixel.height {
            for u in 0..pixel.width {
                if *valid.get(u, v) && pixel.norm_at(u, v) == T::zero() {
                    return Err(FeatureError::NormError { u, v });
                }
            }
        }
    }
    patch.normalize_near_unit();
    pixel.normalize_near_unit();
    let features = FeatureMaps::new(patch, pixel, FeatureSource::External)?;
    Ok(LoadedFeatures { features, renormalized })
}

impl<T: Real> DenseFeatures<T> {
    /// Re-normalizes vectors whose norm is off by more than the unit-norm
    /// tolerance; exact-unit vectors are left bit-identical.
    fn normalize_near_unit(&mut self) {
        for chunk in self.data.chunks_exact_mut(self.dim.max(1)) {
            let n = chunk.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt().as_f64();
            if n > 0.0 && (n - 1.0).abs() > T::UNIT_NORM_TOL {
                normalize_in_place(chunk);
            }
        }
    }
}

fn dense_from_tensor<T: Real>(t: Tensor, renormalized: &mut usize) -> Result<DenseFeatures<T>, FeatureError> {
    let &[h, w, d] = t.dims() else {
        return Err(TensorError::Format(format!("feature tensor must be rank 3, got dims {:?}", t.dims())).into());
    };
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    for chunk in t.data().chunks_exact(d.max(1)) {
        let n = chunk.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if n > 0.0 && (n - 1.0).abs() > LOAD_WARN_TOL {
            *renormalized += 1;
        }
    }
    let data = t.into_data().into_iter().map(|v| T::lit(v as f64)).collect();
    DenseFeatures::from_vec(w, h, d, data)
}

/// Dense vector of a single location, handy for tests and diagnostics.
pub fn feature_vector<T: Real>(f: &DenseFeatures<T>, u: usize, v: usize) -> DVector<T> {
    DVector::from_column_slice(f.get(u, v))
}
