//! LaserID spherical projection of a LiDAR scan into range and reflectance maps.
//!
//! Columns follow the azimuth `phi = atan2(y, x)`, increasing with `phi` and
//! starting at [`ProjectionConfig::azimuth_origin`]. Rows are the laser ring
//! index (row 0 is the highest-elevation ring), not the elevation angle, so a
//! ring whose beams are slightly mis-aligned still fills a single row.
//!
//! Empty cells carry the sentinel `-1` in every map. When several points fall
//! into one cell, the nearest one wins and supplies range, reflectance and
//! index together.

use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::Pose;
use crate::grid::Grid;
use crate::scalar::Real;

/// Points closer than this to the sensor origin have no defined direction.
pub const ZERO_POINT_EPS: f64 = 1e-12;

/// Sentinel stored in empty range/reflectance cells.
pub const EMPTY: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("point is at the sensor origin")]
    ZeroPoint,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite value in point {0}")]
    NonFinite(usize),
    #[error("laser id list has {got} entries for {expected} points")]
    LaserIdLength { expected: usize, got: usize },
    #[error("laser id {id} of point {point} is outside [0, {n_lasers})")]
    LaserIdOutOfRange { point: usize, id: u32, n_lasers: usize },
    #[error("all points share one elevation; cannot split into {0} lasers")]
    InsufficientSpread(usize),
    #[error("invalid projection config: {0}")]
    InvalidConfig(&'static str),
    #[error("pixel ({u}, {v}) is outside the {width}x{height} map")]
    OutOfBounds {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("pixel ({u}, {v}) is empty")]
    EmptyPixel { u: usize, v: usize },
    #[error("inconsistent projection maps: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint<T: Real> {
    pub position: Vector3<T>,
    pub reflectance: T,
}

impl<T: Real> LidarPoint<T> {
    pub fn new(x: T, y: T, z: T, reflectance: T) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            reflectance,
        }
    }
}

/// A LiDAR scan: `N ≥ 1` points with optional per-point laser ring ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    points: Vec<LidarPoint<T>>,
    laser_ids: Option<Vec<u32>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<LidarPoint<T>>, laser_ids: Option<Vec<u32>>) -> Result<Self, ProjectionError> {
        if points.is_empty() {
            return Err(ProjectionError::EmptyCloud);
        }
        for (i, p) in points.iter().enumerate() {
            let finite = p.position.iter().all(|v| v.is_finite()) && p.reflectance.is_finite();
            if !finite {
                return Err(ProjectionError::NonFinite(i));
            }
        }
        if let Some(ids) = &laser_ids {
            if ids.len() != points.len() {
                return Err(ProjectionError::LaserIdLength {
                    expected: points.len(),
                    got: ids.len(),
                });
            }
        }
        Ok(Self { points, laser_ids })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LidarPoint<T>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &LidarPoint<T> {
        &self.points[i]
    }

    pub fn laser_ids(&self) -> Option<&[u32]> {
        self.laser_ids.as_deref()
    }

    pub fn with_laser_ids(mut self, ids: Vec<u32>) -> Result<Self, ProjectionError> {
        if ids.len() != self.points.len() {
            return Err(ProjectionError::LaserIdLength {
                expected: self.points.len(),
                got: ids.len(),
            });
        }
        self.laser_ids = Some(ids);
        Ok(self)
    }

    /// Applies a rigid transform to every point; ids and reflectance are kept.
    pub fn transformed(&self, pose: &Pose<T>) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| LidarPoint {
                    position: pose.apply(&p.position),
                    reflectance: p.reflectance,
                })
                .collect(),
            laser_ids: self.laser_ids.clone(),
        }
    }
}

/// Spherical coordinates: range, elevation `theta` and azimuth `phi` (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spherical<T: Real> {
    pub r: T,
    pub theta: T,
    pub phi: T,
}

/// `r = ‖p‖`, `theta = asin(z / r)`, `phi = atan2(y, x) ∈ (−π, π]`.
pub fn spherical_coords<T: Real>(point: &Vector3<T>) -> Result<Spherical<T>, ProjectionError> {
    let r = point.norm();
    if !(r >= T::lit(ZERO_POINT_EPS)) {
        return Err(ProjectionError::ZeroPoint);
    }
    let s = (point.z / r).clamp(-T::one(), T::one());
    Ok(Spherical {
        r,
        theta: s.asin(),
        phi: point.y.atan2(point.x),
    })
}

/// Laser ring index per point.
///
/// Ids carried by the cloud are returned unchanged. Otherwise the elevation
/// span `[theta_min, theta_max]` is cut into `n_lasers` uniform bins with id 0
/// at the top. Points at the origin get the bottom id.
pub fn assign_laser_ids<T: Real>(cloud: &PointCloud<T>, n_lasers: usize) -> Result<Vec<u32>, ProjectionError> {
    if n_lasers == 0 {
        return Err(ProjectionError::InvalidConfig("n_lasers must be >= 1"));
    }
    if let Some(ids) = cloud.laser_ids() {
        return Ok(ids.to_vec());
    }
    let thetas: Vec<Option<f64>> = cloud
        .points()
        .iter()
        .map(|p| spherical_coords(&p.position).ok().map(|s| s.theta.as_f64()))
        .collect();
    let (lo, hi) = thetas
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    let last = (n_lasers - 1) as u32;
    if !(hi > lo) {
        if n_lasers > 1 {
            return Err(ProjectionError::InsufficientSpread(n_lasers));
        }
        return Ok(vec![0; cloud.len()]);
    }
    let span = hi - lo;
    Ok(thetas
        .iter()
        .map(|t| match t {
            Some(t) => {
                let bin = (n_lasers as f64 * (hi - t) / span).floor();
                (bin.max(0.0) as u32).min(last)
            }
            None => last,
        })
        .collect())
}

/// Geometry of the projection maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Azimuth bins (map width).
    pub width: usize,
    /// Laser count (map height).
    pub height: usize,
    /// Azimuth of the left edge of column 0 (radians).
    pub azimuth_origin: f64,
    /// Range mapped to full white in exported previews (meters).
    pub range_max: f64,
}

impl ProjectionConfig {
    /// 64-beam scanner, 1024 azimuth bins.
    pub fn kitti() -> Self {
        Self {
            width: 1024,
            height: 64,
            azimuth_origin: -std::f64::consts::PI,
            range_max: 80.0,
        }
    }

    /// 32-beam scanner, 1024 azimuth bins.
    pub fn nuscenes() -> Self {
        Self {
            height: 32,
            ..Self::kitti()
        }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.width == 0 || self.height == 0 {
            return Err(ProjectionError::InvalidConfig("map width and height must be >= 1"));
        }
        if !self.azimuth_origin.is_finite() {
            return Err(ProjectionError::InvalidConfig("azimuth_origin must be finite"));
        }
        if !(self.range_max > 0.0) {
            return Err(ProjectionError::InvalidConfig("range_max must be > 0"));
        }
        Ok(())
    }

    /// Angular width of one column (radians).
    pub fn column_width(&self) -> f64 {
        std::f64::consts::TAU / self.width as f64
    }

    /// Column holding azimuth `phi`.
    pub fn column_of<T: Real>(&self, phi: T) -> usize {
        let tau = T::two_pi();
        let a = phi - T::lit(self.azimuth_origin);
        let a = a - (a / tau).floor() * tau;
        let u = (T::from_usize_lossy(self.width) * a / tau).floor().as_f64();
        (u.max(0.0) as usize).min(self.width - 1)
    }

    /// Azimuth of the center of column `u`.
    pub fn column_center(&self, u: usize) -> f64 {
        self.azimuth_origin + (u as f64 + 0.5) * self.column_width()
    }
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self::kitti()
    }
}

/// Range, reflectance and point-index maps of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMaps<T: Real> {
    range: Grid<T>,
    reflectance: Grid<T>,
    index: Grid<i64>,
}

impl<T: Real> ProjectionMaps<T> {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            range: Grid::filled(width, height, T::lit(EMPTY)),
            reflectance: Grid::filled(width, height, T::lit(EMPTY)),
            index: Grid::filled(width, height, -1),
        }
    }

    /// Reassembles maps (e.g. after loading) and checks their invariants
    /// against the cloud they index.
    pub fn from_parts(
        range: Grid<T>,
        reflectance: Grid<T>,
        index: Grid<i64>,
        cloud_len: usize,
    ) -> Result<Self, ProjectionError> {
        let dims = (range.width(), range.height());
        if (reflectance.width(), reflectance.height()) != dims || (index.width(), index.height()) != dims {
            return Err(ProjectionError::Inconsistent("map shapes differ".into()));
        }
        for ((r, f), i) in range.as_slice().iter().zip(reflectance.as_slice()).zip(index.as_slice()) {
            let occ = *i >= 0;
            if occ != (*r >= T::zero()) || occ != (*f >= T::zero()) {
                return Err(ProjectionError::Inconsistent(
                    "occupancy disagrees between range, reflectance and index".into(),
                ));
            }
            if occ && *i as usize >= cloud_len {
                return Err(ProjectionError::Inconsistent(format!(
                    "index {i} beyond cloud of {cloud_len} points"
                )));
            }
        }
        Ok(Self {
            range,
            reflectance,
            index,
        })
    }

    pub fn width(&self) -> usize {
        self.range.width()
    }

    pub fn height(&self) -> usize {
        self.range.height()
    }

    pub fn range(&self) -> &Grid<T> {
        &self.range
    }

    pub fn reflectance(&self) -> &Grid<T> {
        &self.reflectance
    }

    pub fn index(&self) -> &Grid<i64> {
        &self.index
    }

    #[inline]
    pub fn is_occupied(&self, u: usize, v: usize) -> bool {
        *self.index.get(u, v) >= 0
    }

    /// Index of the point stored at `(u, v)`, if any.
    #[inline]
    pub fn point_index(&self, u: usize, v: usize) -> Option<usize> {
        let i = *self.index.get(u, v);
        (i >= 0).then_some(i as usize)
    }

    pub fn occupancy(&self) -> Grid<bool> {
        self.index.map(|i| *i >= 0)
    }

    pub fn occupied_count(&self) -> usize {
        self.index.as_slice().iter().filter(|i| **i >= 0).count()
    }

    /// Fraction of occupied cells in `[0, 1]`.
    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied_count() as f64 / (self.width() * self.height()) as f64
    }

    /// Occupied cells in row-major order as `(u, v, point index)`.
    pub fn occupied_pixels(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let w = self.width();
        self.index
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, i)| **i >= 0)
            .map(move |(k, i)| (k % w, k / w, *i as usize))
    }

    fn insert(&mut self, u: usize, v: usize, r: T, reflectance: T, idx: usize) {
        let current = *self.range.get(u, v);
        if current < T::zero() || r < current {
            self.range.set(u, v, r);
            self.reflectance.set(u, v, reflectance);
            self.index.set(u, v, idx as i64);
        }
    }

    /// 8-bit range preview: `range / range_max`, empty cells black.
    pub fn range_preview(&self, range_max: f64) -> GrayImage {
        to_gray(&self.range, |r| r / range_max)
    }

    /// 8-bit reflectance preview clamped to `[0, 1]`, empty cells black.
    pub fn reflectance_preview(&self) -> GrayImage {
        to_gray(&self.reflectance, |r| r)
    }
}

fn to_gray<T: Real>(grid: &Grid<T>, scale: impl Fn(f64) -> f64) -> GrayImage {
    let mut img = GrayImage::new(grid.width() as u32, grid.height() as u32);
    for (k, v) in grid.as_slice().iter().enumerate() {
        let v = v.as_f64();
        let byte = if v < 0.0 {
            0
        } else {
            (scale(v).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        img.as_mut()[k] = byte;
    }
    img
}

/// Writes an 8-bit image as binary PGM (`P5`).
pub fn write_pgm(path: &Path, img: &GrayImage) -> std::io::Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(std::io::Error::other)?;
    std::fs::File::create(path)?.write_all(&buf)
}

/// Map cell of a point given its ring id; `None` for points at the origin or
/// with an id outside the map.
pub fn map_pixel<T: Real>(point: &Vector3<T>, laser_id: u32, cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    let s = spherical_coords(point).ok()?;
    let v = laser_id as usize;
    (v < cfg.height).then(|| (cfg.column_of(s.phi), v))
}

/// LaserID projection of `cloud` into `cfg.height × cfg.width` maps.
///
/// Ids come from the cloud when present and from elevation binning
/// otherwise. Points at the origin are skipped.
pub fn project_to_maps<T: Real>(cloud: &PointCloud<T>, cfg: &ProjectionConfig) -> Result<ProjectionMaps<T>, ProjectionError> {
    cfg.validate()?;
    let ids = assign_laser_ids(cloud, cfg.height)?;
    let mut maps = ProjectionMaps::empty(cfg.width, cfg.height);
    for (i, (p, &id)) in cloud.points().iter().zip(&ids).enumerate() {
        if id as usize >= cfg.height {
            return Err(ProjectionError::LaserIdOutOfRange {
                point: i,
                id,
                n_lasers: cfg.height,
            });
        }
        let Ok(s) = spherical_coords(&p.position) else {
            continue;
        };
        maps.insert(cfg.column_of(s.phi), id as usize, s.r, p.reflectance, i);
    }
    Ok(maps)
}

/// Plain spherical projection with rows from elevation,
/// `v = floor(H·(θmax − θ)/(θmax − θmin))`. Kept as the comparison baseline
/// for hole counts; the registration pipeline never uses it.
pub fn project_elevation_baseline<T: Real>(cloud: &PointCloud<T>, cfg: &ProjectionConfig) -> Result<ProjectionMaps<T>, ProjectionError> {
    cfg.validate()?;
    let coords: Vec<Option<Spherical<T>>> = cloud.points().iter().map(|p| spherical_coords(&p.position).ok()).collect();
    let (lo, hi) = coords
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            let t = s.theta.as_f64();
            (lo.min(t), hi.max(t))
        });
    let mut maps = ProjectionMaps::empty(cfg.width, cfg.height);
    let span = hi - lo;
    for (i, (s, p)) in coords.iter().zip(cloud.points()).enumerate() {
        let Some(s) = s else { continue };
        let v = if span > 0.0 {
            let bin = (cfg.height as f64 * (hi - s.theta.as_f64()) / span).floor();
            (bin.max(0.0) as usize).min(cfg.height - 1)
        } else {
            0
        };
        maps.insert(cfg.column_of(s.phi), v, s.r, p.reflectance, i);
    }
    Ok(maps)
}

/// Original point (position, reflectance) stored at map cell `(u, v)`.
pub fn unproject_pixel<T: Real>(
    maps: &ProjectionMaps<T>,
    cloud: &PointCloud<T>,
    u: usize,
    v: usize,
) -> Result<(Vector3<T>, T), ProjectionError> {
    if !maps.index.in_bounds(u, v) {
        return Err(ProjectionError::OutOfBounds {
            u,
            v,
            width: maps.width(),
            height: maps.height(),
        });
    }
    let i = maps.point_index(u, v).ok_or(ProjectionError::EmptyPixel { u, v })?;
    let p = cloud.points().get(i).ok_or_else(|| {
        ProjectionError::Inconsistent(format!("index {i} beyond cloud of {} points", cloud.len()))
    })?;
    Ok((p.position, p.reflectance))
}
