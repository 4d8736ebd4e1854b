//! Registration errors, the success criterion and aggregate statistics.
//!
//! RRE is the sum of absolute Euler angles (degrees) of the relative
//! rotation `R_gtᵀ·R_E`, decomposed by default as intrinsic Z-Y-X
//! (`R = Rz(yaw)·Ry(pitch)·Rx(roll)`).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geom::{orthonormality_residual, Pose};
use crate::scalar::Real;

/// Orthonormality tolerance accepted by [`rre`].
pub const RRE_ORTHONORMAL_TOL: f64 = 1e-6;
/// `|sin(pitch)|` above which the decomposition is treated as gimbal-locked.
const GIMBAL_EPS: f64 = 1e-12;

/// Histogram bin edges (m) for RTE; the last bin is open-ended.
pub const RTE_BIN_EDGES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
/// Histogram bin edges (degrees) for RRE; the last bin is open-ended.
pub const RRE_BIN_EDGES: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("matrix is not a rotation (residual {0:e})")]
    NotARotation(f64),
    #[error("no samples to aggregate")]
    EmptyList,
    #[error("unknown Euler convention {0:?}")]
    UnknownConvention(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EulerConvention {
    /// `R = Rz·Ry·Rx`.
    #[default]
    Zyx,
    /// `R = Rx·Ry·Rz`.
    Xyz,
}

impl fmt::Display for EulerConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zyx => "zyx",
            Self::Xyz => "xyz",
        })
    }
}

impl FromStr for EulerConvention {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zyx" => Ok(Self::Zyx),
            "xyz" => Ok(Self::Xyz),
            _ => Err(MetricsError::UnknownConvention(s.to_string())),
        }
    }
}

/// Euclidean distance between two translations.
pub fn rte<T: Real>(t_gt: &Vector3<T>, t_e: &Vector3<T>) -> T {
    (t_gt - t_e).norm()
}

/// Euler angles (radians) of `r` in the given convention, ordered as the
/// rotations are composed: `(z, y, x)` for Z-Y-X, `(x, y, z)` for X-Y-Z.
/// At gimbal lock the third angle is zero and the in-plane rotation goes to
/// the first.
pub fn euler_angles(r: &Matrix3<f64>, convention: EulerConvention) -> [f64; 3] {
    match convention {
        EulerConvention::Zyx => {
            let s = (-r[(2, 0)]).clamp(-1.0, 1.0);
            let pitch = s.asin();
            if s.abs() > 1.0 - GIMBAL_EPS {
                [(-r[(0, 1)]).atan2(r[(1, 1)]), pitch, 0.0]
            } else {
                [r[(1, 0)].atan2(r[(0, 0)]), pitch, r[(2, 1)].atan2(r[(2, 2)])]
            }
        }
        EulerConvention::Xyz => {
            let s = r[(0, 2)].clamp(-1.0, 1.0);
            let pitch = s.asin();
            if s.abs() > 1.0 - GIMBAL_EPS {
                [r[(2, 1)].atan2(r[(1, 1)]), pitch, 0.0]
            } else {
                [(-r[(1, 2)]).atan2(r[(2, 2)]), pitch, (-r[(0, 1)]).atan2(r[(0, 0)])]
            }
        }
    }
}

/// Sum of absolute Euler angles of `r_gtᵀ·r_e`, in degrees.
pub fn rre<T: Real>(r_gt: &Matrix3<T>, r_e: &Matrix3<T>, convention: EulerConvention) -> Result<T, MetricsError> {
    let tol = RRE_ORTHONORMAL_TOL.max(T::ORTHONORMAL_TOL);
    for r in [r_gt, r_e] {
        let res = orthonormality_residual(r);
        if !(res <= tol) {
            return Err(MetricsError::NotARotation(res));
        }
    }
    let a: Matrix3<f64> = r_gt.map(|x| x.as_f64());
    let b: Matrix3<f64> = r_e.map(|x| x.as_f64());
    let rel = a.transpose() * b;
    let sum: f64 = euler_angles(&rel, convention).iter().map(|x| x.abs()).sum();
    Ok(T::lit(sum.to_degrees()))
}

/// Geodesic angle (degrees) of the relative rotation; a convention-free
/// companion to [`rre`].
pub fn geodesic_angle_deg<T: Real>(r_gt: &Matrix3<T>, r_e: &Matrix3<T>) -> f64 {
    let a: Matrix3<f64> = r_gt.map(|x| x.as_f64());
    let b: Matrix3<f64> = r_e.map(|x| x.as_f64());
    let r = a.transpose() * b;
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2((r.trace() - 1.0) / 2.0).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessThresholds {
    /// Metres.
    pub rte: f64,
    /// Degrees.
    pub rre: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self { rte: 2.0, rre: 5.0 }
    }
}

pub fn success(rte: f64, rre: f64, thresholds: &SuccessThresholds) -> bool {
    rte < thresholds.rte && rre < thresholds.rre
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationErrors {
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
}

impl RegistrationErrors {
    pub fn new(rte: f64, rre: f64, thresholds: &SuccessThresholds) -> Self {
        Self {
            rte,
            rre,
            success: success(rte, rre, thresholds),
        }
    }
}

/// RTE/RRE of an estimated extrinsic against the ground truth.
pub fn registration_errors<T: Real>(
    gt: &Pose<T>,
    estimate: &Pose<T>,
    thresholds: &SuccessThresholds,
    convention: EulerConvention,
) -> Result<RegistrationErrors, MetricsError> {
    let t = rte(gt.translation(), estimate.translation()).as_f64();
    let r = rre(gt.rotation(), estimate.rotation(), convention)?.as_f64();
    Ok(RegistrationErrors::new(t, r, thresholds))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateStats {
    pub mean_rte: f64,
    pub std_rte: f64,
    pub mean_rre: f64,
    pub std_rre: f64,
    /// Percentage of successful samples.
    pub accuracy: f64,
    pub count: usize,
}

impl AggregateStats {
    /// `RTE mean ± std | RRE mean ± std | Acc`, two decimals.
    pub fn table_row(&self) -> String {
        format!(
            "{:.2} ± {:.2} | {:.2} ± {:.2} | {:.2}",
            self.mean_rte, self.std_rte, self.mean_rre, self.std_rre, self.accuracy
        )
    }
}

pub const TABLE_HEADER: &str = "RTE(m) | RRE(deg) | Acc(%)";

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population mean and standard deviation over every sample, no outlier
/// removal.
pub fn aggregate(samples: &[RegistrationErrors]) -> Result<AggregateStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let (mean_rte, std_rte) = mean_std(samples.iter().map(|s| s.rte));
    let (mean_rre, std_rre) = mean_std(samples.iter().map(|s| s.rre));
    let ok = samples.iter().filter(|s| s.success).count();
    Ok(AggregateStats {
        mean_rte,
        std_rte,
        mean_rre,
        std_rre,
        accuracy: 100.0 * ok as f64 / samples.len() as f64,
        count: samples.len(),
    })
}

/// Percentage of `values` in each bin `[edges[i], edges[i+1])`, plus a final
/// open bin `[edges[last], ∞)`. Values below `edges[0]` are not counted.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len()];
    for v in values {
        if let Some(b) = edges.iter().rposition(|e| v >= e) {
            counts[b] += 1;
        }
    }
    let n = values.len().max(1) as f64;
    counts.into_iter().map(|c| 100.0 * c as f64 / n).collect()
}

/// Writes RTE and RRE histograms as `metric,lower,upper,percent` rows.
pub fn write_histograms(out: &mut impl Write, samples: &[RegistrationErrors]) -> std::io::Result<()> {
    writeln!(out, "metric,lower,upper,percent")?;
    let rtes: Vec<f64> = samples.iter().map(|s| s.rte).collect();
    let rres: Vec<f64> = samples.iter().map(|s| s.rre).collect();
    for (name, values, edges) in [("rte", &rtes, &RTE_BIN_EDGES[..]), ("rre", &rres, &RRE_BIN_EDGES[..])] {
        for (i, pct) in histogram(values, edges).into_iter().enumerate() {
            let upper = edges.get(i + 1).map_or("inf".to_string(), |e| e.to_string());
            writeln!(out, "{name},{},{upper},{pct:.4}", edges[i])?;
        }
    }
    Ok(())
}
