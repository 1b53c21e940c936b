//! Rigid motions, weighted Kabsch superposition and RMSD.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn with_translation(mut self, t: [f64; 3]) -> Self {
        self.translation = t;
        self
    }

    fn r(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        RigidTransform {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotate(p);
        std::array::from_fn(|i| q[i] + self.translation[i])
    }

    pub fn inverse(&self) -> Self {
        let rt = self.r().transpose();
        let t = -(rt * Vector3::from(self.translation));
        Self::from_parts(&rt, &t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let r = self.r() * other.r();
        let t = self.r() * Vector3::from(other.translation) + Vector3::from(self.translation);
        Self::from_parts(&r, &t)
    }

    pub fn orthogonality_error(&self) -> f64 {
        let r = self.r();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    pub fn determinant(&self) -> f64 {
        self.r().determinant()
    }

    /// Rotation angle (radians) of `selfᵀ · other`.
    pub fn geodesic_distance(&self, other: &RigidTransform) -> f64 {
        let m = self.r().transpose() * other.r();
        ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Uniform rotation over SO(3) from a normalised Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    let mut q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    RigidTransform {
        rotation: [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ],
        translation: [0.0; 3],
    }
}

pub fn apply(t: &RigidTransform, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    pts.iter().map(|&p| t.apply_point(p)).collect()
}

/// Σ wᵢ ‖T(srcᵢ) − dstᵢ‖².
pub fn weighted_residual(t: &RigidTransform, src: &[[f64; 3]], dst: &[[f64; 3]], weights: &[f64]) -> f64 {
    src.iter()
        .zip(dst)
        .zip(weights)
        .map(|((s, d), w)| {
            let p = t.apply_point(*s);
            w * (0..3).map(|k| (p[k] - d[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Proper rigid motion minimising `Σ wᵢ ‖R srcᵢ + t − dstᵢ‖²`.
pub fn weighted_kabsch(src: &[[f64; 3]], dst: &[[f64; 3]], weights: &[f64]) -> Result<RigidTransform> {
    let n = src.len();
    if dst.len() != n || weights.len() != n {
        return Err(Error::shape(format!("{n} points and weights"), format!("{} / {}", dst.len(), weights.len())));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("kabsch needs at least 3 points, got {n}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("kabsch weights must be finite and nonnegative".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Degenerate("all kabsch weights are zero".into()));
    }
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += Vector3::from(*s) * *w;
        cd += Vector3::from(*d) * *w;
    }
    cs /= wsum;
    cd /= wsum;
    let mut h = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate("covariance rank < 2 (collinear or coincident points)".into()));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = cd - r * cs;
    Ok(RigidTransform::from_parts(&r, &t))
}

/// Root-mean-square pointwise distance.
pub fn rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} points", a.len()), format!("{} points", b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok((s / a.len() as f64).sqrt())
}
