//! Efficient Perspective-n-Point with barycentric control points.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use super::PoseError;
use crate::geom::{Intrinsics, Pose};
use crate::matching::CorrespondenceSet;
use crate::scalar::Real;

/// Smallest/largest covariance eigenvalue ratio below which the points are
/// treated as planar and three control points are used.
const PLANAR_RATIO: f64 = 1e-6;
/// Middle/largest eigenvalue ratio below which the points are collinear.
const COLLINEAR_RATIO: f64 = 1e-12;
/// Spread (squared metres) below which all points coincide.
const COINCIDENT_VARIANCE: f64 = 1e-20;
const GN_ITERATIONS: usize = 10;

/// Pose mapping `points` onto `pixels` under intrinsics `k`.
pub fn epnp<T: Real>(points: &[Vector3<T>], pixels: &[Vector2<T>], k: &Intrinsics<T>) -> Result<Pose<T>, PoseError> {
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| p.map(|x| x.as_f64())).collect();
    let px: Vec<Vector2<f64>> = pixels.iter().map(|p| p.map(|x| x.as_f64())).collect();
    solve(&pts, &px, &k.cast()).map(|p| p.cast())
}

/// [`epnp`] on the points and image pixels of a correspondence set.
pub fn epnp_correspondences<T: Real>(set: &CorrespondenceSet<T>, k: &Intrinsics<T>) -> Result<Pose<T>, PoseError> {
    let (pts, px) = split_f64(set);
    solve(&pts, &px, &k.cast()).map(|p| p.cast())
}

pub(crate) fn split_f64<T: Real>(set: &CorrespondenceSet<T>) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
    set.items
        .iter()
        .map(|c| {
            (
                c.point.map(|x| x.as_f64()),
                Vector2::new(c.image_pixel.0 as f64, c.image_pixel.1 as f64),
            )
        })
        .unzip()
}

/// Pixel distance between each projected point and its observation;
/// infinite for points that end up behind the camera.
pub fn reprojection_errors<T: Real>(
    pose: &Pose<T>,
    points: &[Vector3<T>],
    pixels: &[Vector2<T>],
    k: &Intrinsics<T>,
) -> Vec<T> {
    points
        .iter()
        .zip(pixels)
        .map(|(p, uv)| match k.project_unbounded(&pose.apply(p)) {
            Some(q) => (q - uv).norm(),
            None => T::lit(f64::INFINITY),
        })
        .collect()
}

pub(crate) fn mean_error(pose: &Pose<f64>, pts: &[Vector3<f64>], px: &[Vector2<f64>], k: &Intrinsics<f64>) -> f64 {
    let e = reprojection_errors(pose, pts, px, k);
    e.iter().sum::<f64>() / e.len() as f64
}

/// Column of the `β_k·β_l` product (`k ≤ l`) in the distance-constraint
/// matrix: `b11, b12, b22, b13, b23, b33, b14, b24, b34, b44`.
fn product_index(k: usize, l: usize) -> usize {
    l * (l + 1) / 2 + k
}

struct Problem {
    /// Control points in the world frame.
    control: Vec<Vector3<f64>>,
    /// Barycentric coordinates, one row per point.
    alphas: Vec<Vec<f64>>,
    /// Null-space basis of `M`, smallest eigenvalue first, each of length `3m`.
    kernel: Vec<DVector<f64>>,
    /// Control-point pairs and their squared world distances.
    pairs: Vec<(usize, usize)>,
    rho: DVector<f64>,
    l: DMatrix<f64>,
}

pub(crate) fn solve(pts: &[Vector3<f64>], px: &[Vector2<f64>], k: &Intrinsics<f64>) -> Result<Pose<f64>, PoseError> {
    let n = pts.len();
    if n < 4 || px.len() < 4 {
        return Err(PoseError::TooFew { needed: 4, got: n.min(px.len()) });
    }
    if px.len() != n {
        return Err(PoseError::Degenerate("point and pixel counts differ"));
    }
    let problem = setup(pts, px, k)?;
    let nv = problem.kernel.len();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if let Some(b) = betas_n1(&problem) {
        candidates.push(b);
    }
    if let Some(b) = betas_n2(&problem) {
        candidates.push(b);
    }
    if nv >= 4 {
        if let Some(b) = betas_n3(&problem) {
            candidates.push(b);
        }
    }

    let mut best: Option<(f64, Pose<f64>)> = None;
    for mut betas in candidates {
        gauss_newton(&problem, &mut betas);
        let Some(pose) = pose_from_betas(&problem, &betas, pts) else {
            continue;
        };
        let err = mean_error(&pose, pts, px, k);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(PoseError::Degenerate("no finite EPnP solution"))
}

fn setup(pts: &[Vector3<f64>], px: &[Vector2<f64>], k: &Intrinsics<f64>) -> Result<Problem, PoseError> {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    if lambda[0] < COINCIDENT_VARIANCE {
        return Err(PoseError::Degenerate("coincident points"));
    }
    if lambda[1] < COLLINEAR_RATIO * lambda[0] {
        return Err(PoseError::Degenerate("collinear points"));
    }
    let m = if lambda[2] < PLANAR_RATIO * lambda[0] { 3 } else { 4 };

    let scale: Vec<f64> = lambda[..m - 1].iter().map(|l| l.sqrt()).collect();
    let mut control = vec![centroid];
    for a in 0..m - 1 {
        control.push(centroid + axes[a] * scale[a]);
    }
    let alphas: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            let d = p - centroid;
            let mut a = vec![0.0; m];
            for j in 1..m {
                a[j] = d.dot(&axes[j - 1]) / scale[j - 1];
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();

    let mut mm = DMatrix::zeros(2 * pts.len(), 3 * m);
    for (i, (a, uv)) in alphas.iter().zip(px).enumerate() {
        for j in 0..m {
            mm[(2 * i, 3 * j)] = a[j] * k.fx;
            mm[(2 * i, 3 * j + 2)] = a[j] * (k.cx - uv.x);
            mm[(2 * i + 1, 3 * j + 1)] = a[j] * k.fy;
            mm[(2 * i + 1, 3 * j + 2)] = a[j] * (k.cy - uv.y);
        }
    }
    let mtm = mm.transpose() * &mm;
    let eig = mtm.symmetric_eigen();
    let mut idx: Vec<usize> = (0..3 * m).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let nv = if m == 4 { 4 } else { 3 };
    let kernel: Vec<DVector<f64>> = idx[..nv].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let rho = DVector::from_iterator(pairs.len(), pairs.iter().map(|&(a, b)| (control[a] - control[b]).norm_squared()));
    let mut l = DMatrix::zeros(pairs.len(), nv * (nv + 1) / 2);
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = kernel
            .iter()
            .map(|v| Vector3::new(v[3 * a] - v[3 * b], v[3 * a + 1] - v[3 * b + 1], v[3 * a + 2] - v[3 * b + 2]))
            .collect();
        for hi in 0..nv {
            for lo in 0..=hi {
                let d = dv[lo].dot(&dv[hi]);
                l[(p, product_index(lo, hi))] = if lo == hi { d } else { 2.0 * d };
            }
        }
    }
    Ok(Problem {
        control,
        alphas,
        kernel,
        pairs,
        rho,
        l,
    })
}

fn least_squares(l: &DMatrix<f64>, cols: &[usize], rho: &DVector<f64>) -> Option<DVector<f64>> {
    let sub = DMatrix::from_fn(l.nrows(), cols.len(), |r, c| l[(r, cols[c])]);
    sub.svd(true, true).solve(rho, 1e-12).ok()
}

/// One dominant kernel vector; `b11, b12, b13, b14` solved linearly.
fn betas_n1(p: &Problem) -> Option<Vec<f64>> {
    let nv = p.kernel.len();
    let cols: Vec<usize> = (0..nv).map(|l| product_index(0, l)).collect();
    let x = least_squares(&p.l, &cols, &p.rho)?;
    let mut betas = vec![0.0; nv];
    let (b0, sign) = if x[0] < 0.0 { ((-x[0]).sqrt(), -1.0) } else { (x[0].sqrt(), 1.0) };
    if b0 == 0.0 {
        return None;
    }
    betas[0] = b0;
    for l in 1..nv {
        betas[l] = sign * x[l] / b0;
    }
    Some(betas)
}

/// Two kernel vectors; `b11, b12, b22` solved linearly.
fn betas_n2(p: &Problem) -> Option<Vec<f64>> {
    let x = least_squares(&p.l, &[0, 1, 2], &p.rho)?;
    let mut betas = vec![0.0; p.kernel.len()];
    first_two(&x, &mut betas);
    Some(betas)
}

/// Three kernel vectors; `b11, b12, b22, b13, b23` solved linearly.
fn betas_n3(p: &Problem) -> Option<Vec<f64>> {
    let x = least_squares(&p.l, &[0, 1, 2, 3, 4], &p.rho)?;
    let mut betas = vec![0.0; p.kernel.len()];
    first_two(&x, &mut betas);
    if betas[0] == 0.0 {
        return None;
    }
    betas[2] = x[3] / betas[0];
    Some(betas)
}

fn first_two(x: &DVector<f64>, betas: &mut [f64]) {
    if x[0] < 0.0 {
        betas[0] = (-x[0]).sqrt();
        betas[1] = if x[2] < 0.0 { (-x[2]).sqrt() } else { 0.0 };
    } else {
        betas[0] = x[0].sqrt();
        betas[1] = if x[2] > 0.0 { x[2].sqrt() } else { 0.0 };
    }
    if x[1] < 0.0 {
        betas[0] = -betas[0];
    }
}

fn gauss_newton(p: &Problem, betas: &mut [f64]) {
    let nv = betas.len();
    let rows = p.pairs.len();
    for _ in 0..GN_ITERATIONS {
        let mut j = DMatrix::zeros(rows, nv);
        let mut r = DVector::zeros(rows);
        for row in 0..rows {
            let mut value = -p.rho[row];
            for hi in 0..nv {
                for lo in 0..=hi {
                    let c = p.l[(row, product_index(lo, hi))];
                    value += c * betas[lo] * betas[hi];
                    if lo == hi {
                        j[(row, lo)] += 2.0 * c * betas[lo];
                    } else {
                        j[(row, lo)] += c * betas[hi];
                        j[(row, hi)] += c * betas[lo];
                    }
                }
            }
            r[row] = -value;
        }
        let Ok(delta) = j.svd(true, true).solve(&r, 1e-12) else {
            return;
        };
        for (b, d) in betas.iter_mut().zip(delta.iter()) {
            *b += d;
        }
    }
}

fn pose_from_betas(p: &Problem, betas: &[f64], pts: &[Vector3<f64>]) -> Option<Pose<f64>> {
    let m = p.control.len();
    let mut cc = vec![Vector3::zeros(); m];
    for (b, v) in betas.iter().zip(&p.kernel) {
        for (j, c) in cc.iter_mut().enumerate() {
            *c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
        }
    }
    let mut pc: Vec<Vector3<f64>> = p
        .alphas
        .iter()
        .map(|a| a.iter().zip(&cc).fold(Vector3::zeros(), |acc, (w, c)| acc + c * *w))
        .collect();
    if pc.iter().map(|q| q.z).sum::<f64>() < 0.0 {
        pc.iter_mut().for_each(|q| *q = -*q);
    }
    rigid_fit(pts, &pc)
}

/// Least-squares rotation and translation with `dst ≈ R·src + t`.
pub(crate) fn rigid_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose<f64>> {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let t = cd - r * cs;
    if !r.iter().chain(t.iter()).all(|x| x.is_finite()) {
        return None;
    }
    Some(Pose::from_approx(r, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rot_x, rot_y, rot_z};
    use proptest::prelude::*;

    fn kitti_k() -> Intrinsics<f64> {
        Intrinsics::new(718.856, 718.856, 607.19, 185.22, 1241, 376).unwrap()
    }

    fn rte(a: &Pose<f64>, b: &Pose<f64>) -> f64 {
        (a.translation() - b.translation()).norm()
    }

    fn rre_deg(a: &Pose<f64>, b: &Pose<f64>) -> f64 {
        let r = a.rotation().transpose() * b.rotation();
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        s.atan2((r.trace() - 1.0) / 2.0).to_degrees()
    }

    fn image(pose: &Pose<f64>, pts: &[Vector3<f64>], k: &Intrinsics<f64>) -> Vec<Vector2<f64>> {
        pts.iter().map(|p| k.project_unbounded(&pose.apply(p)).unwrap()).collect()
    }

    #[test]
    fn identity_from_six_points() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.5, 6.0),
            Vector3::new(-1.0, 0.3, 7.0),
            Vector3::new(0.4, -1.0, 4.5),
            Vector3::new(-0.6, -0.4, 8.0),
            Vector3::new(1.5, 1.2, 5.5),
        ];
        let k = kitti_k();
        let px = image(&Pose::identity(), &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(rte(&est, &Pose::identity()) < 1e-6);
        assert!(rre_deg(&est, &Pose::identity()) < 1e-6);
    }

    #[test]
    fn too_few_and_degenerate() {
        let k = kitti_k();
        let pts: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 5.0 + i as f64)).collect();
        let px = vec![Vector2::new(1.0, 1.0); 3];
        assert_eq!(epnp(&pts, &px, &k), Err(PoseError::TooFew { needed: 4, got: 3 }));

        let line: Vec<_> = (0..6).map(|i| Vector3::new(i as f64 * 0.5, 0.2 * i as f64, 5.0 + i as f64)).collect();
        let px = vec![Vector2::new(1.0, 1.0); 6];
        assert!(matches!(epnp(&line, &px, &k), Err(PoseError::Degenerate(_))));
        let same = vec![Vector3::new(1.0, 2.0, 5.0); 6];
        assert!(matches!(epnp(&same, &px, &k), Err(PoseError::Degenerate(_))));
    }

    #[test]
    fn planar_scene_is_recovered() {
        let k = kitti_k();
        let pts: Vec<_> = (0..12)
            .map(|i| Vector3::new((i % 4) as f64 * 1.3 - 2.0, (i / 4) as f64 * 0.9 - 1.0, 0.0))
            .collect();
        let gt = Pose::new(rot_x(0.3) * rot_y(-0.2), Vector3::new(0.2, -0.1, 8.0)).unwrap();
        let px = image(&gt, &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(rte(&est, &gt) < 1e-6, "rte {}", rte(&est, &gt));
        assert!(rre_deg(&est, &gt) < 1e-6);
    }

    #[test]
    fn minimal_four_points() {
        let k = kitti_k();
        let pts = vec![
            Vector3::new(-2.0, -1.0, 0.5),
            Vector3::new(2.5, -0.5, -0.4),
            Vector3::new(0.3, 2.0, 0.9),
            Vector3::new(0.1, 0.2, -1.2),
        ];
        let gt = Pose::new(rot_z(0.4) * rot_x(0.1), Vector3::new(-0.5, 0.3, 10.0)).unwrap();
        let px = image(&gt, &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(rte(&est, &gt) < 1e-6);
        assert!(rre_deg(&est, &gt) < 1e-6);
    }

    #[test]
    fn f32_interface() {
        let k = kitti_k();
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|i| {
                let a = i as f64;
                Vector3::new((a * 1.7).sin() * 3.0, (a * 0.9).cos() * 2.0, 10.0 + (a * 2.3).sin() * 2.0)
            })
            .collect();
        let gt = Pose::new(rot_y(0.05), Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let px = image(&gt, &pts, &k);
        let pts32: Vec<Vector3<f32>> = pts.iter().map(|p| p.cast()).collect();
        let px32: Vec<Vector2<f32>> = px.iter().map(|p| p.cast()).collect();
        let est: Pose<f32> = epnp(&pts32, &px32, &k.cast()).unwrap();
        assert!(rte(&est.cast(), &gt) < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn noise_free_recovery(
            yaw in -3.1f64..3.1, pitch in -0.5f64..0.5, roll in -0.5f64..0.5,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
            n in 5usize..60, seed in 0u64..10_000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = kitti_k();
            let gt = Pose::new(rot_z(yaw) * rot_y(pitch) * rot_x(roll), Vector3::new(tx, ty, tz)).unwrap();
            // Points drawn in the camera frustum, then mapped to the world.
            let inv = gt.inverse();
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    let z = rng.random_range(4.0..40.0);
                    let u = rng.random_range(0.0..1241.0);
                    let v = rng.random_range(0.0..376.0);
                    inv.apply(&k.back_project(&Vector2::new(u, v), z))
                })
                .collect();
            let px = image(&gt, &pts, &k);
            let est = epnp(&pts, &px, &k).unwrap();
            prop_assert!(rte(&est, &gt) < 1e-6, "rte {}", rte(&est, &gt));
            prop_assert!(rre_deg(&est, &gt) < 1e-6, "rre {}", rre_deg(&est, &gt));
        }
    }
}
