//! Similarity-transform recovery: Umeyama closed form and RANSAC.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::numerics::{Prng, Tensor};
use crate::{Error, Result};

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Checks the SO(3) and positive-scale invariants to `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        check_rotation(&rotation, 1e-9)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Degenerate(alloc::format!("scale {scale} is not positive")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Pose { rotation, translation, scale })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Applies the transform to every row of an `n × 3` tensor.
    pub fn transform_points(&self, pts: &Tensor) -> Tensor {
        let mut out = Vec::with_capacity(pts.len());
        for i in 0..pts.rows() {
            let q = self.apply(&row3(pts, i));
            out.extend_from_slice(q.as_slice());
        }
        Tensor::new(&[pts.rows(), 3], out).expect("n × 3")
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }
}

/// Errors unless `r` is orthonormal with determinant +1 within `tol`.
pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(ortho <= tol) || !((det - 1.0).abs() <= tol) {
        return Err(Error::NotARotation(alloc::format!(
            "|RᵀR − I|∞ = {ortho:e}, det = {det}"
        )));
    }
    Ok(())
}

/// Rotation by `angle` radians about the unit `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Geodesic angle of a rotation, in radians.
///
/// Uses `atan2(sin θ, cos θ)` from the skew and trace parts; `acos` of the
/// trace alone loses about half the digits near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    libm::atan2(v.norm() / 2.0, (r.trace() - 1.0) / 2.0)
}

pub(crate) fn row3(t: &Tensor, i: usize) -> Vector3<f64> {
    let r = t.row(i);
    Vector3::new(r[0], r[1], r[2])
}

fn check_pairs(src: &Tensor, dst: &Tensor) -> Result<usize> {
    if src.cols() != 3 || dst.cols() != 3 || src.rows() != dst.rows() {
        return Err(Error::shape("umeyama", src.shape(), dst.shape()));
    }
    Ok(src.rows())
}

/// Least-squares similarity transform taking `src` rows onto `dst` rows.
pub fn umeyama(src: &Tensor, dst: &Tensor) -> Result<Pose> {
    let n = check_pairs(src, dst)?;
    umeyama_subset(src, dst, &(0..n).collect::<Vec<_>>())
}

fn umeyama_subset(src: &Tensor, dst: &Tensor, idx: &[usize]) -> Result<Pose> {
    let n = idx.len();
    if n < 3 {
        return Err(Error::Degenerate(alloc::format!("{n} point pairs, at least 3 needed")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = idx.iter().map(|&i| row3(src, i)).sum::<Vector3<f64>>() * inv_n;
    let mu_d = idx.iter().map(|&i| row3(dst, i)).sum::<Vector3<f64>>() * inv_n;
    let mut var_s = 0.0;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let ds = row3(src, i) - mu_s;
        let dd = row3(dst, i) - mu_d;
        var_s += ds.norm_squared();
        cov += dd * ds.transpose();
    }
    var_s *= inv_n;
    cov *= inv_n;
    let spread = mu_s.norm_squared().max(1.0);
    if !(var_s > 1e-24 * spread) {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = (d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)]) / var_s;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive scale".into()));
    }
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Pose { rotation, translation, scale })
}

/// How the RANSAC inlier threshold is set, in destination units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InlierThreshold {
    Absolute(f64),
    /// Fraction of the source bounding-box diagonal.
    RelativeToSourceDiagonal(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sample_size: usize,
    pub threshold: InlierThreshold,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 128,
            sample_size: 4,
            threshold: InlierThreshold::RelativeToSourceDiagonal(0.02),
            min_inlier_ratio: 0.1,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        let t = match self.threshold {
            InlierThreshold::Absolute(t) | InlierThreshold::RelativeToSourceDiagonal(t) => t,
        };
        if self.sample_size < 3 || self.iterations < 1 || !(t > 0.0) {
            return Err(Error::Config(alloc::format!("invalid RANSAC configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Iteration whose hypothesis produced the kept inlier set.
    pub iteration: usize,
    /// Mean squared residual of `pose` over the inliers.
    pub inlier_residual: f64,
}

/// Squared residuals `‖dst − (s·R·src + t)‖²` for every pair.
pub fn squared_residuals(pose: &Pose, src: &Tensor, dst: &Tensor) -> Vec<f64> {
    (0..src.rows())
        .map(|i| (row3(dst, i) - pose.apply(&row3(src, i))).norm_squared())
        .collect()
}

fn bbox_diagonal(t: &Tensor) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..t.rows() {
        for k in 0..3 {
            lo[k] = lo[k].min(t.at(i, k));
            hi[k] = hi[k].max(t.at(i, k));
        }
    }
    libm::sqrt((0..3).map(|k| (hi[k] - lo[k]) * (hi[k] - lo[k])).sum())
}

/// RANSAC over minimal Umeyama fits, with a final refit on the best inlier set.
///
/// Iteration `k` draws its sample from `Prng::stream(cfg.seed, k)`. The kept
/// hypothesis maximises the inlier count; ties go to the lower refit residual
/// and then the earlier iteration.
pub fn ransac_umeyama(src: &Tensor, dst: &Tensor, cfg: &RansacConfig) -> Result<RansacOutcome> {
    cfg.validate()?;
    let n = check_pairs(src, dst)?;
    if n < cfg.sample_size {
        return Err(Error::Degenerate(alloc::format!(
            "{n} point pairs, sample size {}",
            cfg.sample_size
        )));
    }
    let threshold = match cfg.threshold {
        InlierThreshold::Absolute(t) => t,
        InlierThreshold::RelativeToSourceDiagonal(f) => f * bbox_diagonal(src),
    };
    let thr2 = threshold * threshold;
    let required = libm::ceil(cfg.min_inlier_ratio * n as f64) as usize;

    let mut best: Option<RansacOutcome> = None;
    let mut best_hypothesis: Option<(Pose, usize)> = None;
    for it in 0..cfg.iterations {
        let mut prng = Prng::stream(cfg.seed, it as u64);
        let sample = prng.sample_distinct(n, cfg.sample_size);
        let Ok(hypothesis) = umeyama_subset(src, dst, &sample) else {
            continue;
        };
        let res = squared_residuals(&hypothesis, src, dst);
        let inliers: Vec<bool> = res.iter().map(|&r| r < thr2).collect();
        let count = inliers.iter().filter(|&&b| b).count();
        if best_hypothesis.as_ref().is_none_or(|(_, c)| count > *c) {
            best_hypothesis = Some((hypothesis, count));
        }
        if count < 3 {
            continue;
        }
        if let Some(b) = &best {
            if count < b.inlier_count {
                continue;
            }
        }
        let idx: Vec<usize> = (0..n).filter(|&i| inliers[i]).collect();
        let Ok(refit) = umeyama_subset(src, dst, &idx) else {
            continue;
        };
        let rr = squared_residuals(&refit, src, dst);
        let inlier_residual = idx.iter().map(|&i| rr[i]).sum::<f64>() / count as f64;
        let better = match &best {
            None => true,
            Some(b) => count > b.inlier_count || inlier_residual < b.inlier_residual,
        };
        if better {
            best = Some(RansacOutcome {
                pose: refit,
                inliers,
                inlier_count: count,
                iteration: it,
                inlier_residual,
            });
        }
    }
    match best {
        Some(b) if b.inlier_count >= required => Ok(b),
        other => Err(Error::RobustFailure {
            best: other.as_ref().map(|b| b.pose).or(best_hypothesis.map(|h| h.0)).map(Box::new),
            best_inliers: other.map_or(best_hypothesis.map_or(0, |h| h.1), |b| b.inlier_count),
            required,
        }),
    }
}

/// Pose and size of an observed instance from its predicted NOCS coordinates.
pub fn estimate_pose(nocs: &Tensor, observed: &Tensor, cfg: &RansacConfig) -> Result<Pose> {
    if nocs.rows() != observed.rows() {
        return Err(Error::shape("estimate_pose", nocs.rows(), observed.rows()));
    }
    ransac_umeyama(nocs, observed, cfg).map(|o| o.pose)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Tensor {
        let mut p = Prng::new(seed);
        Tensor::new(&[n, 3], (0..3 * n).map(|_| p.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_recovered() {
        let src = cloud(20, 1);
        let p = umeyama(&src, &src).unwrap();
        assert!((p.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(p.translation.norm() < 1e-12);
        assert!((p.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let src = cloud(2, 1);
        assert!(matches!(umeyama(&src, &src), Err(Error::Degenerate(_))));
    }

    #[test]
    fn coincident_source() {
        let src = Tensor::full(&[5, 3], 0.3);
        let dst = cloud(5, 2);
        assert!(matches!(umeyama(&src, &dst), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mirrored_points_give_proper_rotation() {
        let src = Tensor::from_rows(&[[1.0, 0.2, 0.1], [0.1, 1.3, -0.2], [-0.3, 0.1, 0.9], [0.4, -0.8, -0.5]]).unwrap();
        let dst = src.map(|v| -v);
        let p = umeyama(&src, &dst).unwrap();
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
        check_rotation(&p.rotation, 1e-9).unwrap();
    }

    #[test]
    fn axis_angle_is_rotation() {
        let r = axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.7);
        check_rotation(&r, 1e-12).unwrap();
        assert!((rotation_angle(&r) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = Pose::new(axis_angle(&Vector3::y(), 0.3), Vector3::new(1.0, 2.0, 3.0), 2.5).unwrap();
        let q = p.compose(&p.inverse());
        assert!((q.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(q.translation.norm() < 1e-12);
        assert!((q.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_ransac_config() {
        let src = cloud(10, 1);
        let cfg = RansacConfig { sample_size: 2, ..RansacConfig::default() };
        assert!(matches!(ransac_umeyama(&src, &src, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn estimate_pose_row_mismatch() {
        assert!(estimate_pose(&cloud(10, 1), &cloud(9, 2), &RansacConfig::default()).is_err());
    }
}
