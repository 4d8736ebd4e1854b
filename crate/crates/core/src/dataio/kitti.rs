//! KITTI-layout ingestion: velodyne scans, calibration files and the
//! perturbed frame pairs used for registration.

use std::io::Write;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};

use super::image::resize_bilinear;
use super::DataError;
use crate::geom::{Intrinsics, PerturbationSpec, Pose};
use crate::projection::{project_to_maps, LidarPoint, PointCloud, ProjectionConfig, ProjectionMaps};
use crate::scalar::Real;

/// Default camera resolution after downsampling.
pub const DEFAULT_IMAGE_DIMS: (usize, usize) = (512, 160);

/// Reads a scan of little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn read_point_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>, DataError> {
    parse_point_cloud(&std::fs::read(path)?)
}

pub fn parse_point_cloud<T: Real>(bytes: &[u8]) -> Result<PointCloud<T>, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(16) {
        return Err(DataError::Format(format!(
            "point cloud size {} is not a positive multiple of 16 bytes",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| T::lit(f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64);
            LidarPoint::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Ok(PointCloud::new(points, None)?)
}

/// Writes the scan in the same layout; laser ids are not stored.
pub fn write_point_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.position.x, p.position.y, p.position.z, p.reflectance] {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Camera matrix and LiDAR-to-camera extrinsics from a calibration file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Upper-left 3×3 block of the projection matrix.
    pub k: Matrix3<f64>,
    /// LiDAR to rectified camera 2; includes the camera baseline offset.
    pub extrinsics: Pose<f64>,
}

impl Calibration {
    pub fn intrinsics<T: Real>(&self, width: usize, height: usize) -> Result<Intrinsics<T>, DataError> {
        Ok(Intrinsics::new(
            T::lit(self.k[(0, 0)]),
            T::lit(self.k[(1, 1)]),
            T::lit(self.k[(0, 2)]),
            T::lit(self.k[(1, 2)]),
            width,
            height,
        )?)
    }
}

fn parse_row<const N: usize>(key: &str, rest: &str) -> Result<[f64; N], DataError> {
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Format(format!("{key}: {e}")))?;
    vals.try_into()
        .map_err(|v: Vec<f64>| DataError::Format(format!("{key}: expected {N} numbers, found {}", v.len())))
}

/// Parses an odometry `calib.txt` (keys `P2` and `Tr`, or `P2` and
/// `Tr_velo_to_cam`). The translation part of `P2` is folded into the
/// extrinsics as `K⁻¹·P2[:, 3]`.
pub fn parse_calibration(text: &str) -> Result<Calibration, DataError> {
    let mut p2 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        match key.trim() {
            "P2" => p2 = Some(parse_row::<12>("P2", rest)?),
            "Tr" | "Tr_velo_to_cam" => tr = Some(parse_row::<12>("Tr", rest)?),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| DataError::Format("calibration lacks P2".into()))?;
    let tr = tr.ok_or_else(|| DataError::Format("calibration lacks Tr".into()))?;
    let k = Matrix3::new(p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10]);
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| DataError::Format("P2 camera matrix is singular".into()))?;
    let offset = k_inv * Vector3::new(p2[3], p2[7], p2[11]);
    let velo = Pose::from_approx(
        Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]),
        Vector3::new(tr[3], tr[7], tr[11]),
    );
    let extrinsics = Pose::from_translation(offset).compose(&velo);
    Ok(Calibration { k, extrinsics })
}

pub fn read_calibration(path: &Path) -> Result<Calibration, DataError> {
    parse_calibration(&std::fs::read_to_string(path)?)
}

/// One camera image and scan as recorded, before perturbation.
#[derive(Debug, Clone)]
pub struct RawPair<T: Real> {
    pub image: RgbImage,
    pub cloud: PointCloud<T>,
    /// Intrinsics at the image's native resolution.
    pub intrinsics: Intrinsics<T>,
    pub calibration: Pose<T>,
}

/// A perturbed pair ready for registration.
#[derive(Debug, Clone)]
pub struct FramePair<T: Real> {
    pub image: RgbImage,
    /// The perturbed scan (rotation and translation applied).
    pub cloud: PointCloud<T>,
    /// Maps generated after the rotation and before the translation.
    pub maps: ProjectionMaps<T>,
    pub intrinsics: Intrinsics<T>,
    /// `calibration ∘ perturbation⁻¹`: maps the perturbed scan into the camera.
    pub gt_extrinsics: Pose<T>,
    pub applied_perturbation: Pose<T>,
}

/// Perturbs the scan and downsamples the image to `target` `(width, height)`.
///
/// The sampled yaw is applied first and the maps are generated from the
/// rotated scan; the x/y translation is applied afterwards. Map cell indices
/// are unaffected by the translation, so they stay valid for the final cloud.
pub fn prepare_pair<T: Real>(
    raw: &RawPair<T>,
    perturbation: &PerturbationSpec,
    target: (usize, usize),
    proj: &ProjectionConfig,
) -> Result<FramePair<T>, DataError> {
    let (w, h) = target;
    if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
        return Err(DataError::BadDims { width: w, height: h });
    }
    let pert: Pose<T> = perturbation.sample()?;
    let rotated = raw.cloud.transformed(&Pose::new(*pert.rotation(), Vector3::zeros())?);
    let maps = project_to_maps(&rotated, proj)?;
    let cloud = rotated.transformed(&Pose::from_translation(*pert.translation()));
    let image = resize_bilinear(&raw.image, w as u32, h as u32);
    let intrinsics = if (raw.intrinsics.width, raw.intrinsics.height) == (w, h) {
        raw.intrinsics
    } else {
        raw.intrinsics.rescaled(w, h)
    };
    Ok(FramePair {
        image,
        cloud,
        maps,
        intrinsics,
        gt_extrinsics: raw.calibration.compose(&pert.inverse()),
        applied_perturbation: pert,
    })
}

/// Loads a raw pair from explicit file paths.
pub fn load_raw_pair<T: Real>(cloud: &Path, image: &Path, calib: &Path) -> Result<RawPair<T>, DataError> {
    let image = super::image::read_rgb(image)?;
    let cal = read_calibration(calib)?;
    Ok(RawPair {
        intrinsics: cal.intrinsics(image.width() as usize, image.height() as usize)?,
        calibration: cal.extrinsics.cast(),
        cloud: read_point_cloud(cloud)?,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rot_z;
    use approx::assert_relative_eq;
    use image::Rgb;

    const CALIB: &str = "P0: 7.0e2 0 6.0e2 0 0 7.0e2 1.8e2 0 0 0 1 0\n\
P2: 700 0 600 45 0 700 180 -0.35 0 0 1 0.0028\n\
Tr: 0 -1 0 0.1 0 0 -1 -0.05 1 0 0 -0.3\n";

    fn small_raw() -> RawPair<f64> {
        let pts = (0..200)
            .map(|i| {
                let a = i as f64 * 0.031;
                LidarPoint::new(10.0 * a.cos(), 10.0 * a.sin(), -1.0 + 0.01 * i as f64, 0.5)
            })
            .collect();
        RawPair {
            image: RgbImage::from_pixel(64, 32, Rgb([1, 2, 3])),
            cloud: PointCloud::new(pts, None).unwrap(),
            intrinsics: Intrinsics::new(50.0, 50.0, 32.0, 16.0, 64, 32).unwrap(),
            calibration: Pose::new(
                Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
                Vector3::new(0.1, 0.2, 0.3),
            )
            .unwrap(),
        }
    }

    #[test]
    fn point_cloud_sizes() {
        assert!(matches!(parse_point_cloud::<f64>(&[]), Err(DataError::Format(_))));
        assert!(matches!(parse_point_cloud::<f64>(&[0; 17]), Err(DataError::Format(_))));
        let mut one = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            one.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_point_cloud::<f32>(&one).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.point(0).position.y, 2.0);
    }

    #[test]
    fn point_cloud_roundtrip_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..500)
            .map(|_| LidarPoint::new(rng.random::<f32>() * 50.0, rng.random(), -rng.random::<f32>(), rng.random()))
            .collect();
        let cloud = PointCloud::new(pts, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_point_cloud(&path, &cloud).unwrap();
        let back: PointCloud<f32> = read_point_cloud(&path).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            for i in 0..3 {
                assert_eq!(a.position[i].to_bits(), b.position[i].to_bits());
            }
            assert_eq!(a.reflectance.to_bits(), b.reflectance.to_bits());
        }
    }

    #[test]
    fn calibration_folds_camera_offset() {
        let cal = parse_calibration(CALIB).unwrap();
        assert_eq!(cal.k[(0, 0)], 700.0);
        // K⁻¹·[45, −0.35, 0.0028]: z = 0.0028, y = (−0.35 − 180·z)/700, x = (45 − 600·z)/700.
        let z = 0.0028;
        let expect = Vector3::new((45.0 - 600.0 * z) / 700.0 + 0.1, (-0.35 - 180.0 * z) / 700.0 - 0.05, z - 0.3);
        assert_relative_eq!(*cal.extrinsics.translation(), expect, epsilon = 1e-12);
        assert!(parse_calibration("P2: 1 2 3").is_err());
        assert!(parse_calibration("Tr: 1 0 0 0 0 1 0 0 0 0 1 0").is_err());
    }

    #[test]
    fn zero_perturbation_keeps_calibration() {
        let raw = small_raw();
        let pair = prepare_pair(&raw, &PerturbationSpec::none(), (32, 16), &ProjectionConfig::kitti()).unwrap();
        assert_eq!(pair.gt_extrinsics, raw.calibration);
        assert_eq!(pair.cloud, raw.cloud);
        assert_eq!((pair.image.width(), pair.image.height()), (32, 16));
        assert_eq!(pair.intrinsics.fx, 25.0);
    }

    #[test]
    fn perturbation_is_absorbed_by_ground_truth() {
        let raw = small_raw();
        let spec = PerturbationSpec {
            max_xy_translation: 10.0,
            yaw_range: 360.0,
            seed: 9,
        };
        let pair = prepare_pair(&raw, &spec, (64, 32), &ProjectionConfig::kitti()).unwrap();
        for (orig, moved) in raw.cloud.points().iter().zip(pair.cloud.points()) {
            let a = raw.calibration.apply(&orig.position);
            let b = pair.gt_extrinsics.apply(&moved.position);
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        // Map ranges come from the rotated but untranslated scan.
        for (u, v, i) in pair.maps.occupied_pixels() {
            let r = raw.cloud.point(i).position.norm();
            assert_relative_eq!(*pair.maps.range().get(u, v), r, epsilon = 1e-9);
        }
    }

    #[test]
    fn half_turn_yaw() {
        let raw = small_raw();
        let spec = PerturbationSpec {
            max_xy_translation: 0.0,
            yaw_range: 360.0,
            seed: 0,
        };
        let pair = prepare_pair(&raw, &spec, (64, 32), &ProjectionConfig::kitti()).unwrap();
        let yaw = pair.applied_perturbation.rotation()[(1, 0)].atan2(pair.applied_perturbation.rotation()[(0, 0)]);
        let expect = raw.calibration.rotation() * rot_z(-yaw);
        assert_relative_eq!(*pair.gt_extrinsics.rotation(), expect, epsilon = 1e-12);
        let flip = Pose::from_yaw(std::f64::consts::PI);
        let composed = raw.calibration.compose(&flip.inverse());
        assert_relative_eq!(*composed.rotation(), raw.calibration.rotation() * rot_z(-std::f64::consts::PI), epsilon = 1e-12);
    }

    #[test]
    fn rejects_dims_not_divisible_by_four() {
        let raw = small_raw();
        let err = prepare_pair(&raw, &PerturbationSpec::none(), (30, 16), &ProjectionConfig::kitti()).unwrap_err();
        assert!(matches!(err, DataError::BadDims { .. }));
    }
}
