//! Synthetic scenes with exact ground truth.
//!
//! The scanner sits inside an axis-aligned box room (flat ground plus four
//! walls). Rays are cast at the centers of the map bins, in the frame of the
//! already rotated scan, so every map cell is filled. Points the camera sees
//! are moved sideways at constant depth so they project exactly onto integer
//! pixels. Ideal features give every
//! ground-truth partner the same random unit code.

use std::collections::{BTreeMap, BTreeSet};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::kitti::FramePair;
use super::DataError;
use crate::features::{DenseFeatures, FeatureMaps, FeatureSource, DEFAULT_D_PATCH, DEFAULT_D_PIXEL, PATCH};
use crate::geom::{rot_x, Intrinsics, PerturbationSpec, Pose};
use crate::projection::{project_to_maps, LidarPoint, PointCloud, ProjectionConfig, ProjectionMaps};
use crate::scalar::Real;
use crate::supervision::{ground_truth_corrs, GroundTruthCorrs};

/// Sensor height above the ground plane (meters).
pub const SENSOR_HEIGHT: f64 = 1.73;
/// Elevation of the top and bottom ring (degrees).
pub const ELEVATION_TOP: f64 = 2.0;
pub const ELEVATION_BOTTOM: f64 = -24.8;
/// Wall distances are drawn from this interval (meters).
pub const WALL_RANGE: (f64, f64) = (25.0, 45.0);

const STREAM_GEOMETRY: u64 = 0;
const STREAM_CODES: u64 = 1;
const STREAM_CORRUPTION: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_lasers: usize,
    pub w_r: usize,
    /// Camera patch pairs whose codes are moved to an unrelated patch.
    pub n_outlier_features: usize,
    pub image_dims: (usize, usize),
    pub d_patch: usize,
    pub d_pixel: usize,
    pub max_xy_translation: f64,
    pub yaw_range: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_lasers: usize, w_r: usize, n_outlier_features: usize) -> Self {
        Self {
            seed,
            n_lasers,
            w_r,
            n_outlier_features,
            image_dims: super::kitti::DEFAULT_IMAGE_DIMS,
            d_patch: DEFAULT_D_PATCH,
            d_pixel: DEFAULT_D_PIXEL,
            max_xy_translation: 10.0,
            yaw_range: 360.0,
        }
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            width: self.w_r,
            height: self.n_lasers,
            ..ProjectionConfig::kitti()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        for (w, h) in [(self.w_r, self.n_lasers), self.image_dims] {
            if w == 0 || h == 0 || w % PATCH != 0 || h % PATCH != 0 {
                return Err(DataError::BadDims { width: w, height: h });
            }
        }
        if self.d_patch == 0 || self.d_pixel == 0 {
            return Err(DataError::Format("feature dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn generate<T: Real>(&self) -> Result<SyntheticScene<T>, DataError> {
        self.validate()?;
        let scene = build(self)?;
        Ok(scene.cast())
    }
}

/// A generated scene and its oracle data.
#[derive(Debug, Clone)]
pub struct SyntheticScene<T: Real> {
    pub config: SyntheticConfig,
    /// Perturbed scan with laser ids, ordered ring by ring.
    pub cloud: PointCloud<T>,
    pub maps: ProjectionMaps<T>,
    pub image: RgbImage,
    pub intrinsics: Intrinsics<T>,
    pub calibration: Pose<T>,
    pub perturbation: Pose<T>,
    pub gt_extrinsics: Pose<T>,
    pub camera_features: FeatureMaps<T>,
    pub lidar_features: FeatureMaps<T>,
    pub gt: GroundTruthCorrs<T>,
    /// `(camera patch, lidar patch)` pairs sharing a code, flattened row-major.
    pub paired_patches: Vec<(usize, usize)>,
    /// `(paired camera patch, receiving camera patch)` for corrupted pairs.
    pub corrupted: Vec<(usize, usize)>,
}

impl<T: Real> SyntheticScene<T> {
    pub fn projection(&self) -> ProjectionConfig {
        self.config.projection()
    }

    pub fn frame_pair(&self) -> FramePair<T> {
        FramePair {
            image: self.image.clone(),
            cloud: self.cloud.clone(),
            maps: self.maps.clone(),
            intrinsics: self.intrinsics,
            gt_extrinsics: self.gt_extrinsics,
            applied_perturbation: self.perturbation,
        }
    }

    fn cast<U: Real>(&self) -> SyntheticScene<U> {
        let cloud = cast_cloud(&self.cloud);
        let maps = cast_maps(&self.maps, cloud.len());
        let intrinsics = self.intrinsics.cast();
        let gt_extrinsics = self.gt_extrinsics.cast();
        let gt = ground_truth_corrs(&cloud, &maps, &intrinsics, &gt_extrinsics, self.config.image_dims);
        SyntheticScene {
            config: self.config,
            cloud,
            maps,
            image: self.image.clone(),
            intrinsics,
            calibration: self.calibration.cast(),
            perturbation: self.perturbation.cast(),
            gt_extrinsics,
            camera_features: self.camera_features.cast(),
            lidar_features: self.lidar_features.cast(),
            gt,
            paired_patches: self.paired_patches.clone(),
            corrupted: self.corrupted.clone(),
        }
    }
}

/// Scene with the default camera (512×160) and feature sizes.
pub fn generate_synthetic(
    seed: u64,
    n_lasers: usize,
    w_r: usize,
    n_outlier_features: usize,
) -> Result<SyntheticScene<f64>, DataError> {
    SyntheticConfig::new(seed, n_lasers, w_r, n_outlier_features).generate()
}

fn cast_cloud<T: Real, U: Real>(c: &PointCloud<T>) -> PointCloud<U> {
    let pts = c
        .points()
        .iter()
        .map(|p| {
            let f = |v: T| U::lit(v.as_f64());
            LidarPoint::new(f(p.position.x), f(p.position.y), f(p.position.z), f(p.reflectance))
        })
        .collect();
    PointCloud::new(pts, c.laser_ids().map(<[u32]>::to_vec)).expect("cast of a valid cloud")
}

fn cast_maps<T: Real, U: Real>(m: &ProjectionMaps<T>, cloud_len: usize) -> ProjectionMaps<U> {
    let f = |v: &T| U::lit(v.as_f64());
    ProjectionMaps::from_parts(m.range().map(f), m.reflectance().map(f), m.index().clone(), cloud_len)
        .expect("cast of valid maps")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Box room around the sensor: walls at `x = x_pos, −x_neg`, `y = y_pos, −y_neg`.
#[derive(Debug, Clone, Copy)]
struct Room {
    x_pos: f64,
    x_neg: f64,
    y_pos: f64,
    y_neg: f64,
}

impl Room {
    /// Distance along `dir` from `origin` (inside the room) to the first surface.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut s = f64::INFINITY;
        let mut plane = |d: f64, o: f64, lo: f64, hi: f64| {
            if d > 0.0 {
                s = s.min((hi - o) / d);
            } else if d < 0.0 {
                s = s.min((lo - o) / d);
            }
        };
        plane(dir.x, origin.x, -self.x_neg, self.x_pos);
        plane(dir.y, origin.y, -self.y_neg, self.y_pos);
        plane(dir.z, origin.z, -SENSOR_HEIGHT, f64::INFINITY);
        s
    }
}

/// Smooth pattern in `[0, 1]` painted on every surface.
fn texture(p: &Vector3<f64>) -> f64 {
    let a = (1.3 * p.x + 0.7 * p.z).sin() * (1.1 * p.y - 0.9 * p.z).sin();
    let b = (0.37 * (p.x + p.y)).sin();
    (0.5 + 0.3 * a + 0.2 * b).clamp(0.0, 1.0)
}

fn ring_elevation(i: usize, n: usize) -> f64 {
    if n == 1 {
        return ELEVATION_TOP.to_radians();
    }
    (ELEVATION_TOP + (ELEVATION_BOTTOM - ELEVATION_TOP) * i as f64 / (n - 1) as f64).to_radians()
}

fn unit_code(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn build(cfg: &SyntheticConfig) -> Result<SyntheticScene<f64>, DataError> {
    let mut geo = stream_rng(cfg.seed, STREAM_GEOMETRY);
    let mut wall = || geo.random_range(WALL_RANGE.0..WALL_RANGE.1);
    let room = Room {
        x_pos: wall(),
        x_neg: wall(),
        y_pos: wall(),
        y_neg: wall(),
    };
    let tilt = geo.random_range(-1.0f64..1.0).to_radians();
    let pert_seed = geo.random();
    let pert: Pose<f64> = PerturbationSpec {
        max_xy_translation: cfg.max_xy_translation,
        yaw_range: cfg.yaw_range,
        seed: pert_seed,
    }
    .sample()?;

    // LiDAR x forward, y left, z up; camera x right, y down, z forward.
    let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let calibration = Pose::new(rot_x(tilt) * axes, Vector3::new(0.06, -0.08, -0.27))?;
    let (iw, ih) = cfg.image_dims;
    let f = 296.0 * iw as f64 / 512.0;
    let k = Intrinsics::new(f, f, (iw as f64 - 1.0) / 2.0, (ih as f64 - 1.0) / 2.0, iw, ih)?;

    let proj = cfg.projection();
    let r_p = *pert.rotation();
    let cam_inv = calibration.inverse();
    let mut rotated = Vec::with_capacity(cfg.n_lasers * cfg.w_r);
    let mut ids = Vec::with_capacity(cfg.n_lasers * cfg.w_r);
    for ring in 0..cfg.n_lasers {
        let theta = ring_elevation(ring, cfg.n_lasers);
        for u in 0..cfg.w_r {
            let phi = proj.column_center(u);
            let d_rot = Vector3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin());
            let d = r_p.transpose() * d_rot;
            let mut p = d * room.hit(&Vector3::zeros(), &d);
            let q = calibration.apply(&p);
            if let Some(px) = k.project_unbounded(&q) {
                let snapped = Vector2::new(px.x.round(), px.y.round());
                if k.contains(&snapped) {
                    p = cam_inv.apply(&k.back_project(&snapped, q.z));
                }
            }
            rotated.push(LidarPoint::new(0.0, 0.0, 0.0, texture(&p)));
            rotated.last_mut().unwrap().position = r_p * p;
            ids.push(ring as u32);
        }
    }
    let rotated = PointCloud::new(rotated, Some(ids))?;
    let maps = project_to_maps(&rotated, &proj)?;
    let cloud = rotated.transformed(&Pose::from_translation(*pert.translation()));
    let gt_extrinsics = calibration.compose(&pert.inverse());
    let gt = ground_truth_corrs(&cloud, &maps, &k, &gt_extrinsics, cfg.image_dims);

    let image = render(&room, &calibration, &k);
    let codes = ideal_features(cfg, &maps, &gt)?;
    Ok(SyntheticScene {
        config: *cfg,
        cloud,
        maps,
        image,
        intrinsics: k,
        calibration,
        perturbation: pert,
        gt_extrinsics,
        camera_features: codes.camera,
        lidar_features: codes.lidar,
        gt,
        paired_patches: codes.paired,
        corrupted: codes.corrupted,
    })
}

/// Ray-cast camera view of the textured room.
fn render(room: &Room, calibration: &Pose<f64>, k: &Intrinsics<f64>) -> RgbImage {
    let origin = calibration.center();
    let r_t = calibration.rotation().transpose();
    RgbImage::from_fn(k.width as u32, k.height as u32, |x, y| {
        let ray = k.back_project(&Vector2::new(x as f64, y as f64), 1.0);
        let dir = r_t * ray;
        let t = texture(&(origin + dir * room.hit(&origin, &dir)));
        let c = |v: f64| (255.0 * v).round() as u8;
        Rgb([c(t), c(0.1 + 0.8 * t), c(1.0 - t)])
    })
}

struct IdealCodes {
    camera: FeatureMaps<f64>,
    lidar: FeatureMaps<f64>,
    paired: Vec<(usize, usize)>,
    corrupted: Vec<(usize, usize)>,
}

fn ideal_features(
    cfg: &SyntheticConfig,
    maps: &ProjectionMaps<f64>,
    gt: &GroundTruthCorrs<f64>,
) -> Result<IdealCodes, DataError> {
    let mut rng = stream_rng(cfg.seed, STREAM_CODES);
    let (iw, ih) = cfg.image_dims;
    let (mw, mh) = (cfg.w_r, cfg.n_lasers);
    let (dp, dx) = (cfg.d_patch, cfg.d_pixel);

    let mut lidar_px = DenseFeatures::zeros(mw, mh, dx);
    for (u, v, _) in maps.occupied_pixels() {
        lidar_px.get_mut(u, v).copy_from_slice(&unit_code(&mut rng, dx));
    }
    let mut cam_px = DenseFeatures::zeros(iw, ih, dx);
    for v in 0..ih {
        for u in 0..iw {
            cam_px.get_mut(u, v).copy_from_slice(&unit_code(&mut rng, dx));
        }
    }
    let mut taken = BTreeSet::new();
    for &(img, map) in &gt.pixel_corrs {
        if taken.insert(img) {
            let code = lidar_px.get(map.0, map.1).to_vec();
            cam_px.get_mut(img.0, img.1).copy_from_slice(&code);
        }
    }

    let (cpw, cph) = (iw / PATCH, ih / PATCH);
    let (lpw, lph) = (mw / PATCH, mh / PATCH);
    let mut lidar_patch = DenseFeatures::zeros(lpw, lph, dp);
    for pv in 0..lph {
        for pu in 0..lpw {
            let any = (0..PATCH * PATCH).any(|o| maps.is_occupied(pu * PATCH + o % PATCH, pv * PATCH + o / PATCH));
            if any {
                lidar_patch.get_mut(pu, pv).copy_from_slice(&unit_code(&mut rng, dp));
            }
        }
    }
    let mut cam_patch = DenseFeatures::zeros(cpw, cph, dp);
    for pv in 0..cph {
        for pu in 0..cpw {
            cam_patch.get_mut(pu, pv).copy_from_slice(&unit_code(&mut rng, dp));
        }
    }

    // Pair patches one-to-one, most shared correspondences first.
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(img, map) in &gt.pixel_corrs {
        let c = (img.1 / PATCH) * cpw + img.0 / PATCH;
        let l = (map.1 / PATCH) * lpw + map.0 / PATCH;
        *counts.entry((c, l)).or_default() += 1;
    }
    let mut ranked: Vec<((usize, usize), usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used_c = BTreeSet::new();
    let mut used_l = BTreeSet::new();
    let mut paired = Vec::new();
    for ((c, l), _) in ranked {
        if used_c.contains(&c) || used_l.contains(&l) {
            continue;
        }
        used_c.insert(c);
        used_l.insert(l);
        paired.push((c, l));
        let code = lidar_patch.get(l % lpw, l / lpw).to_vec();
        cam_patch.get_mut(c % cpw, c / cpw).copy_from_slice(&code);
    }
    paired.sort_unstable();

    // Corruption: move the codes of a paired camera patch (patch and pixel
    // level) to a camera patch that holds no ground-truth pixel.
    let mut corrupted = Vec::new();
    if cfg.n_outlier_features > 0 {
        let mut crng = stream_rng(cfg.seed, STREAM_CORRUPTION);
        let gt_patches: BTreeSet<usize> = gt
            .pixel_corrs
            .iter()
            .map(|&(img, _)| (img.1 / PATCH) * cpw + img.0 / PATCH)
            .collect();
        let free: Vec<usize> = (0..cpw * cph).filter(|p| !gt_patches.contains(p)).collect();
        let n = cfg.n_outlier_features.min(paired.len()).min(free.len());
        let from = sample(&mut crng, paired.len(), n).into_vec();
        let to = sample(&mut crng, free.len(), n).into_vec();
        for (a, b) in from.into_iter().zip(to) {
            let (a, b) = (paired[a].0, free[b]);
            swap_vectors(&mut cam_patch, (a % cpw, a / cpw), (b % cpw, b / cpw));
            for o in 0..PATCH * PATCH {
                let pa = ((a % cpw) * PATCH + o % PATCH, (a / cpw) * PATCH + o / PATCH);
                let pb = ((b % cpw) * PATCH + o % PATCH, (b / cpw) * PATCH + o / PATCH);
                swap_vectors(&mut cam_px, pa, pb);
            }
            corrupted.push((a, b));
        }
        corrupted.sort_unstable();
    }

    Ok(IdealCodes {
        camera: FeatureMaps::new(cam_patch, cam_px, FeatureSource::Synthetic)?,
        lidar: FeatureMaps::new(lidar_patch, lidar_px, FeatureSource::Synthetic)?,
        paired,
        corrupted,
    })
}

fn swap_vectors(f: &mut DenseFeatures<f64>, a: (usize, usize), b: (usize, usize)) {
    let va = f.get(a.0, a.1).to_vec();
    let vb = f.get(b.0, b.1).to_vec();
    f.get_mut(a.0, a.1).copy_from_slice(&vb);
    f.get_mut(b.0, b.1).copy_from_slice(&va);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_pinhole;

    fn small(seed: u64, outliers: usize) -> SyntheticScene<f64> {
        SyntheticConfig {
            image_dims: (128, 40),
            ..SyntheticConfig::new(seed, 16, 256, outliers)
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        let a = small(3, 5);
        let b = small(3, 5);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.camera_features, b.camera_features);
        assert_eq!(a.lidar_features, b.lidar_features);
        assert_eq!(a.image, b.image);
        assert_eq!(a.corrupted, b.corrupted);
        assert_ne!(small(4, 5).cloud, a.cloud);
    }

    #[test]
    fn scan_fills_every_map_cell() {
        let s = small(1, 0);
        assert_eq!(s.maps.occupied_count(), 16 * 256);
        assert_eq!(s.cloud.len(), 16 * 256);
    }

    #[test]
    fn ground_truth_pixels_are_exact() {
        let s = small(2, 0);
        assert!(s.gt.len() > 50);
        for (&(img, _), p) in s.gt.pixel_corrs.iter().zip(&s.gt.points) {
            let px = project_pinhole(&s.intrinsics, &s.gt_extrinsics, p).unwrap();
            assert!((px.x - img.0 as f64).abs() < 1e-6 && (px.y - img.1 as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn partners_share_codes() {
        let s = small(5, 0);
        let (cam, lid) = (s.camera_features.pixel(), s.lidar_features.pixel());
        let mut seen = BTreeSet::new();
        for &(img, map) in &s.gt.pixel_corrs {
            if seen.insert(img) {
                assert_eq!(cam.get(img.0, img.1), lid.get(map.0, map.1));
            }
        }
        let (cp, lp) = (s.camera_features.patch(), s.lidar_features.patch());
        let cpw = cp.width();
        let lpw = lp.width();
        for &(c, l) in &s.paired_patches {
            assert_eq!(cp.get(c % cpw, c / cpw), lp.get(l % lpw, l / lpw));
        }
    }

    #[test]
    fn corruption_moves_codes() {
        let s = small(6, 4);
        assert_eq!(s.corrupted.len(), 4);
        let cp = s.camera_features.patch();
        let lp = s.lidar_features.patch();
        let (cpw, lpw) = (cp.width(), lp.width());
        for &(a, b) in &s.corrupted {
            let l = s.paired_patches.iter().find(|p| p.0 == a).unwrap().1;
            assert_eq!(cp.get(b % cpw, b / cpw), lp.get(l % lpw, l / lpw));
            assert_ne!(cp.get(a % cpw, a / cpw), lp.get(l % lpw, l / lpw));
        }
    }

    #[test]
    fn f32_scene_matches_f64() {
        let cfg = SyntheticConfig {
            image_dims: (128, 40),
            ..SyntheticConfig::new(8, 16, 256, 0)
        };
        let a: SyntheticScene<f32> = cfg.generate().unwrap();
        let b: SyntheticScene<f64> = cfg.generate().unwrap();
        assert_eq!(a.cloud.len(), b.cloud.len());
        assert_eq!(a.maps.index(), b.maps.index());
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(matches!(generate_synthetic(0, 6, 256, 0), Err(DataError::BadDims { .. })));
    }
}
