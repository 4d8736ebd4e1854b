//! Rigid-body math, the pinhole camera model and perturbation sampling.
//!
//! A [`Pose`] maps points from the LiDAR frame into the camera frame:
//! `q = R·p + t`. Rotations are kept as matrices; Euler conversions live in
//! [`crate::metrics`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Real;

/// Camera-frame depth below which a point counts as not visible (meters).
pub const Z_MIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("matrix is not a proper rotation (orthonormality residual {residual:.3e})")]
    NotARotation { residual: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("invalid perturbation spec: {0}")]
    InvalidPerturbation(&'static str),
    #[error("cannot parse pose: {0}")]
    Parse(String),
}

/// Largest absolute deviation of `R·Rᵀ` from identity and of `det R` from one.
pub fn orthonormality_residual<T: Real>(r: &Matrix3<T>) -> f64 {
    let gram = r * r.transpose() - Matrix3::identity();
    let max_entry = gram.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
    max_entry.max((r.determinant() - T::one()).abs().as_f64())
}

/// Projects a near-rotation onto SO(3) with an SVD (`U·Vᵀ`, sign-corrected).
pub fn orthonormalize<T: Real>(r: &Matrix3<T>) -> Matrix3<T> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut out = u * v_t;
    if out.determinant() < T::zero() {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -T::one();
        out = u * d * v_t;
    }
    out
}

/// Rotation about the z axis by `angle` radians.
pub fn rot_z<T: Real>(angle: T) -> Matrix3<T> {
    let (s, c) = angle.sin_cos();
    let (z, o) = (T::zero(), T::one());
    Matrix3::new(c, -s, z, s, c, z, z, z, o)
}

pub fn rot_y<T: Real>(angle: T) -> Matrix3<T> {
    let (s, c) = angle.sin_cos();
    let (z, o) = (T::zero(), T::one());
    Matrix3::new(c, z, s, z, o, z, -s, z, c)
}

pub fn rot_x<T: Real>(angle: T) -> Matrix3<T> {
    let (s, c) = angle.sin_cos();
    let (z, o) = (T::zero(), T::one());
    Matrix3::new(o, z, z, z, c, -s, z, s, c)
}

/// Rigid transform `p ↦ R·p + t` (LiDAR frame to camera frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Builds a pose, rejecting rotations that fail the orthonormality check.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeomError> {
        let residual = orthonormality_residual(&rotation);
        if !(residual <= T::ORTHONORMAL_TOL) {
            return Err(GeomError::NotARotation { residual });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from an approximately orthonormal matrix, projecting it
    /// onto SO(3) first.
    pub fn from_approx(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        let rotation = if orthonormality_residual(&rotation) > T::ORTHONORMAL_TOL {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Pure rotation about z by `yaw` radians.
    pub fn from_yaw(yaw: T) -> Self {
        Self {
            rotation: rot_z(yaw),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        Pose::from_approx(rotation, translation)
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation * point + self.translation
    }

    /// Camera center expressed in the source frame.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }

    /// Row-major `[R|t]` as twelve numbers (KITTI pose-file layout).
    pub fn to_row(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn from_row(row: &[T; 12]) -> Result<Self, GeomError> {
        let rotation = Matrix3::new(
            row[0], row[1], row[2], row[4], row[5], row[6], row[8], row[9], row[10],
        );
        let translation = Vector3::new(row[3], row[7], row[11]);
        let residual = orthonormality_residual(&rotation);
        // KITTI files are written with limited precision; accept and repair
        // small drift, reject anything that is clearly not a rotation.
        if residual > 1e-4 {
            return Err(GeomError::NotARotation { residual });
        }
        Ok(Self::from_approx(rotation, translation))
    }
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real + fmt::Display> fmt::Display for Pose<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = self.to_row();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl<T: Real> FromStr for Pose<T> {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values: Vec<f64> = s
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| GeomError::Parse(format!("{tok:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 12 {
            return Err(GeomError::Parse(format!(
                "expected 12 numbers, found {}",
                values.len()
            )));
        }
        let mut row = [T::zero(); 12];
        for (dst, src) in row.iter_mut().zip(&values) {
            *dst = T::lit(*src);
        }
        Self::from_row(&row)
    }
}

/// Pinhole intrinsics; pixel `(u, v)` has its center at coordinate `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeomError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive"));
        }
        let w = T::from_usize_lossy(self.width);
        let h = T::from_usize_lossy(self.height);
        if !(self.cx >= T::zero() && self.cx < w) || !(self.cy >= T::zero() && self.cy < h) {
            return Err(GeomError::InvalidIntrinsics("principal point outside the image"));
        }
        Ok(())
    }

    /// Projection of a camera-frame point, ignoring image bounds.
    /// Returns `None` only when the point is not in front of the camera.
    #[inline]
    pub fn project_unbounded(&self, q: &Vector3<T>) -> Option<Vector2<T>> {
        if q.z > T::lit(Z_MIN) {
            Some(Vector2::new(
                self.fx * q.x / q.z + self.cx,
                self.fy * q.y / q.z + self.cy,
            ))
        } else {
            None
        }
    }

    #[inline]
    pub fn contains(&self, px: &Vector2<T>) -> bool {
        px.x >= T::zero()
            && px.y >= T::zero()
            && px.x < T::from_usize_lossy(self.width)
            && px.y < T::from_usize_lossy(self.height)
    }

    /// Camera-frame point at depth `z` seen through pixel coordinate `px`.
    pub fn back_project(&self, px: &Vector2<T>, z: T) -> Vector3<T> {
        Vector3::new(
            (px.x - self.cx) / self.fx * z,
            (px.y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Intrinsics of the same camera after resampling the image to
    /// `width × height` with pixel-center alignment.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = T::from_usize_lossy(width) / T::from_usize_lossy(self.width);
        let sy = T::from_usize_lossy(height) / T::from_usize_lossy(self.height);
        let half = T::lit(0.5);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + half) * sx - half,
            cy: (self.cy + half) * sy - half,
            width,
            height,
        }
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Projects `point` through `pose` and `k`; `None` when behind the near plane
/// or outside `[0, width) × [0, height)`.
pub fn project_pinhole<T: Real>(
    k: &Intrinsics<T>,
    pose: &Pose<T>,
    point: &Vector3<T>,
) -> Option<Vector2<T>> {
    let q = pose.apply(point);
    k.project_unbounded(&q).filter(|px| k.contains(px))
}

/// Random planar perturbation: yaw about z followed by an x/y translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Translation bound on x and y (meters).
    pub max_xy_translation: f64,
    /// Full width of the yaw interval (degrees), centered on zero.
    pub yaw_range: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self {
            max_xy_translation: 0.0,
            yaw_range: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.max_xy_translation >= 0.0) || !self.max_xy_translation.is_finite() {
            return Err(GeomError::InvalidPerturbation("max_xy_translation must be >= 0"));
        }
        if !(0.0..=360.0).contains(&self.yaw_range) {
            return Err(GeomError::InvalidPerturbation("yaw_range must lie in [0, 360]"));
        }
        Ok(())
    }

    /// Draws the perturbation deterministically from `seed`.
    pub fn sample<T: Real>(&self) -> Result<Pose<T>, GeomError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut uniform = |half: f64| {
            if half > 0.0 {
                rng.random_range(-half..=half)
            } else {
                0.0
            }
        };
        let yaw = uniform(self.yaw_range.to_radians() / 2.0);
        let tx = uniform(self.max_xy_translation);
        let ty = uniform(self.max_xy_translation);
        Ok(Pose {
            rotation: rot_z(T::lit(yaw)),
            translation: Vector3::new(T::lit(tx), T::lit(ty), T::zero()),
        })
    }
}

/// Free-function form of [`PerturbationSpec::sample`].
pub fn sample_perturbation<T: Real>(spec: &PerturbationSpec) -> Result<Pose<T>, GeomError> {
    spec.sample()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn compose_identity() {
        let i = Pose::<f64>::identity();
        assert_eq!(i.compose(&i), i);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Pose::new(
            rot_z(0.3) * rot_y(-0.2) * rot_x(1.1),
            Vector3::new(1.0, -2.0, 0.5),
        )
        .unwrap();
        let i = p.compose(&p.inverse());
        assert!(max_abs_diff(i.rotation(), &Matrix3::identity()) < 1e-9);
        assert!(i.translation().norm() < 1e-9);
    }

    #[test]
    fn compose_yaws_adds_angles() {
        // Oracle: explicit matrix of a 90° z rotation.
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let c = Pose::<f64>::from_yaw(deg(30.0)).compose(&Pose::from_yaw(deg(60.0)));
        assert!(max_abs_diff(c.rotation(), &expected) < 1e-12);
    }

    #[test]
    fn apply_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::<f64>::identity().apply(&p), p);
        let shift = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(shift.apply(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
        let r = Pose::<f64>::from_yaw(deg(90.0)).apply(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(r, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Pose::new(m, Vector3::zeros()),
            Err(GeomError::NotARotation { .. })
        ));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn pinhole_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let id = Pose::identity();
        assert_eq!(
            project_pinhole(&k, &id, &Vector3::new(0.0, 0.0, 5.0)),
            Some(Vector2::new(50.0, 50.0))
        );
        assert_eq!(project_pinhole(&k, &id, &Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(project_pinhole(&k, &id, &Vector3::new(0.0, 0.0, 0.0)), None);

        // Principal point at the origin is legal; (1,2,4) lands at (25,50).
        let k0 = Intrinsics::new(100.0, 100.0, 0.0, 0.0, 100, 100).unwrap();
        assert_eq!(
            project_pinhole(&k0, &id, &Vector3::new(1.0, 2.0, 4.0)),
            Some(Vector2::new(25.0, 50.0))
        );
        // Off the image.
        assert_eq!(project_pinhole(&k0, &id, &Vector3::new(-1.0, 2.0, 4.0)), None);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn rescale_keeps_pixel_centers() {
        let k = Intrinsics::new(700.0, 700.0, 620.5, 187.5, 1242, 376).unwrap();
        let small = k.rescaled(621, 188);
        assert_relative_eq!(small.fx, 350.0);
        assert_relative_eq!(small.cx, 310.0, epsilon = 1e-12);
        let q = Vector3::new(1.3, -0.4, 9.0);
        let a = k.project_unbounded(&q).unwrap();
        let b = small.project_unbounded(&q).unwrap();
        assert_relative_eq!((a.x + 0.5) / 2.0 - 0.5, b.x, epsilon = 1e-9);
    }

    #[test]
    fn perturbation_zero_is_identity() {
        let p: Pose<f64> = PerturbationSpec::none().sample().unwrap();
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn perturbation_is_deterministic() {
        let spec = PerturbationSpec {
            max_xy_translation: 10.0,
            yaw_range: 360.0,
            seed: 42,
        };
        let a: Pose<f64> = spec.sample().unwrap();
        let b: Pose<f64> = spec.sample().unwrap();
        assert_eq!(a, b);
        let c: Pose<f64> = PerturbationSpec { seed: 43, ..spec }.sample().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturbation_bounds_over_many_seeds() {
        for seed in 0..10_000 {
            let spec = PerturbationSpec {
                max_xy_translation: 10.0,
                yaw_range: 360.0,
                seed,
            };
            let p: Pose<f64> = spec.sample().unwrap();
            let t = p.translation();
            assert!(t.x.abs() <= 10.0 && t.y.abs() <= 10.0);
            assert_eq!(t.z, 0.0);
            let r = p.rotation();
            assert_eq!(r[(2, 2)], 1.0);
            assert_eq!(r[(0, 2)], 0.0);
        }
    }

    #[test]
    fn perturbation_spec_validation() {
        let bad = PerturbationSpec {
            max_xy_translation: -1.0,
            yaw_range: 0.0,
            seed: 0,
        };
        assert!(bad.sample::<f64>().is_err());
        let bad = PerturbationSpec {
            max_xy_translation: 1.0,
            yaw_range: 400.0,
            seed: 0,
        };
        assert!(bad.sample::<f64>().is_err());
    }

    #[test]
    fn kitti_row_roundtrip() {
        let p = Pose::new(rot_z(0.4) * rot_x(-0.1), Vector3::new(0.1, -3.0, 2.5)).unwrap();
        let text = p.to_string();
        let q: Pose<f64> = text.parse().unwrap();
        assert_eq!(p, q);
        assert!("1 2 3".parse::<Pose<f64>>().is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let p = Pose::<f32>::from_yaw(0.5).compose(&Pose::from_yaw(-0.5));
        assert!(orthonormality_residual(p.rotation()) < 1e-6);
    }

    fn arb_pose() -> impl Strategy<Value = Pose<f64>> {
        (
            -3.2..3.2f64,
            -1.5..1.5f64,
            -3.2..3.2f64,
            prop::array::uniform3(-20.0..20.0f64),
        )
            .prop_map(|(a, b, c, t)| {
                Pose::new(rot_z(a) * rot_y(b) * rot_x(c), Vector3::from(t)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(max_abs_diff(l.rotation(), r.rotation()) < 1e-9);
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
        }

        #[test]
        fn double_inverse(a in arb_pose()) {
            let b = a.inverse().inverse();
            prop_assert!(max_abs_diff(a.rotation(), b.rotation()) < 1e-12);
            prop_assert!((a.translation() - b.translation()).norm() < 1e-12);
        }

        #[test]
        fn projection_is_scale_invariant(
            x in -5.0..5.0f64, y in -5.0..5.0f64, z in 0.5..50.0f64, s in 0.1..10.0f64
        ) {
            let k = Intrinsics::new(300.0, 300.0, 256.0, 80.0, 512, 160).unwrap();
            let a = k.project_unbounded(&Vector3::new(x, y, z)).unwrap();
            let b = k.project_unbounded(&Vector3::new(s * x, s * y, s * z)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
