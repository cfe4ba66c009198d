//! Rotation and rigid-transform algebra.
//!
//! Quaternions use the Hamilton convention and are stored scalar-first as
//! `(w, x, y, z)`. `a * b` applies `b` first, then `a`, matching the matrix
//! product `R(a) R(b)`. Poses are camera-to-world: `p.transform_point(x)`
//! maps a point from camera coordinates into the world frame.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};
use std::ops::{Mul, Neg};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Below this vector-part norm the log/exp maps switch to their series forms.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    /// Normalizes `(w, x, y, z)` into a unit quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        let n = n2.sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::DegenerateInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        // Already unit up to rounding: keep the exact input so that text
        // round trips are lossless.
        if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { w, x, y, z });
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Rotation of `angle` radians about `axis`. A zero axis yields identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-15 {
            return Self::identity();
        }
        Self::from_rotation_vector(&(axis * (angle / n)))
    }

    /// Exponential map from an axis-angle vector.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let theta = v.norm();
        let half = 0.5 * theta;
        let (w, k) = if theta < SMALL_ANGLE {
            (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
        } else {
            (half.cos(), half.sin() / theta)
        };
        Self::renormalized(w, k * v.x, k * v.y, k * v.z)
    }

    /// Logarithm map: the axis-angle vector with angle in `[0, pi]`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        // Pick the hemisphere with w >= 0 so the angle stays in [0, pi].
        let q = if self.w < 0.0 { -*self } else { *self };
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < SMALL_ANGLE {
            return v * (2.0 / q.w);
        }
        v * (2.0 * s.atan2(q.w) / s)
    }

    /// Rotation matrix to quaternion (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self::renormalized(w, x, y, z)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// `[w, x, y, z]`
    pub fn coords(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Four-dimensional dot product of the raw coefficients.
    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product, renormalized.
    pub fn multiply(&self, b: &Self) -> Self {
        let a = self;
        Self::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = Vec3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        v + uv * (2.0 * self.w) + u.cross(&uv) * 2.0
    }

    /// Rotation angle between `self` and `other` in radians, in `[0, pi]`.
    pub fn geodesic_rad(&self, other: &Self) -> f64 {
        let r = self.inverse().multiply(other);
        let s = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
        2.0 * s.atan2(r.w.abs())
    }

    pub fn geodesic_deg(&self, other: &Self) -> f64 {
        self.geodesic_rad(other).to_degrees()
    }

    /// Returns `self` or `-self`, whichever lies in the hemisphere of `reference`.
    pub fn aligned_to(&self, reference: &Self) -> Self {
        if self.dot(reference) < 0.0 {
            -*self
        } else {
            *self
        }
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Neg for UnitQuaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.multiply(&rhs)
    }
}

pub fn quat_multiply(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    a.multiply(b)
}

pub fn quat_rotate(q: &UnitQuaternion, v: &Vec3) -> Vec3 {
    q.rotate(v)
}

pub fn quat_geodesic_deg(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    a.geodesic_deg(b)
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// `self * other`: apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.multiply(&other.rotation),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }

    /// `self^-1 * other`, the transform from this frame to `other`'s frame.
    pub fn relative(&self, other: &Pose) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            rotation: r.multiply(&other.rotation),
            translation: r.rotate(&(other.translation - self.translation)),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Translation scaled by `s`, rotation untouched.
    pub fn with_scaled_translation(&self, s: f64) -> Pose {
        Pose::new(self.rotation, self.translation * s)
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn pose_relative(a: &Pose, b: &Pose) -> Pose {
    a.relative(b)
}

/// Similarity transform `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Alignment {
    pub scale: f64,
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Sim3Alignment {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    /// Applies the similarity to a camera pose: rotation is pre-multiplied,
    /// position is transformed as a point.
    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose::new(
            self.rotation.multiply(&p.rotation),
            self.apply(&p.translation),
        )
    }

    /// Sum of squared residuals `|apply(source_k) - target_k|^2`.
    pub fn sq_error(&self, source: &[Vec3], target: &[Vec3]) -> f64 {
        source
            .iter()
            .zip(target)
            .map(|(s, t)| (self.apply(s) - t).norm_squared())
            .sum()
    }
}

/// Least-squares similarity transform mapping `source` onto `target`.
pub fn umeyama_sim3(source: &[Vec3], target: &[Vec3]) -> Result<Sim3Alignment> {
    umeyama(source, target, true)
}

/// Rigid variant of [`umeyama_sim3`] with the scale pinned to 1.
pub fn umeyama_se3(source: &[Vec3], target: &[Vec3]) -> Result<Sim3Alignment> {
    umeyama(source, target, false)
}

fn umeyama(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<Sim3Alignment> {
    if source.len() != target.len() {
        return Err(Error::DegenerateInput(format!(
            "point sets differ in length ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vec3>() / n;
    let mu_t = target.iter().sum::<Vec3>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-18 {
        return Err(Error::DegenerateInput(
            "source points have zero variance".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("SVD with u requested");
    let v_t = svd.v_t.expect("SVD with v_t requested");
    // Singular values are sorted descending, so the last column is the
    // smallest direction and the one flipped on reflection.
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
        trace / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput(
            "target points have zero variance".into(),
        ));
    }
    let rotation = UnitQuaternion::from_matrix(&rot);
    let translation = mu_t - rotation.rotate(&mu_s) * scale;
    Ok(Sim3Alignment {
        scale,
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn identity_products() {
        let i = UnitQuaternion::identity();
        assert_eq!((i * i).coords(), [1.0, 0.0, 0.0, 0.0]);
        let q = UnitQuaternion::new(0.3, -0.2, 0.9, 0.1).unwrap();
        assert!((q * q.inverse()).geodesic_rad(&i) < 1e-12);
    }

    #[test]
    fn quarter_turns_about_z_compose_to_half_turn() {
        let qz = UnitQuaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        let half = qz * qz;
        let m = qz.to_matrix() * qz.to_matrix();
        assert!((half.to_matrix() - m).norm() < 1e-12);
        assert!((half.geodesic_deg(&UnitQuaternion::identity()) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn rotate_cases() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(UnitQuaternion::identity().rotate(&v), v);
        let q = UnitQuaternion::from_axis_angle(&Vec3::z(), PI);
        assert!(close(&q.rotate(&Vec3::x()), &-Vec3::x(), 1e-12));
    }

    #[test]
    fn geodesic_is_sign_invariant() {
        let q = UnitQuaternion::new(0.5, 0.5, -0.1, 0.7).unwrap();
        assert_eq!(q.geodesic_deg(&q), 0.0);
        assert!(q.geodesic_deg(&-q) < 1e-12);
        let rx = UnitQuaternion::from_axis_angle(&Vec3::x(), FRAC_PI_2);
        assert!((UnitQuaternion::identity().geodesic_deg(&rx) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_quaternion_rejected() {
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(f64::NAN, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn log_exp_roundtrip_near_zero_and_pi() {
        for v in [
            Vec3::new(1e-10, 0.0, -2e-10),
            Vec3::new(0.3, -0.4, 0.5),
            Vec3::new(0.0, 0.0, PI - 1e-9),
        ] {
            let q = UnitQuaternion::from_rotation_vector(&v);
            assert!(close(&q.to_rotation_vector(), &v, 1e-9), "{v:?}");
        }
    }

    #[test]
    fn pose_relative_and_compose() {
        let p = Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.7),
            Vec3::new(1.0, -2.0, 0.5),
        );
        let rel = p.relative(&p);
        assert!(rel.translation.norm() < 1e-12);
        assert!(rel.rotation.geodesic_rad(&UnitQuaternion::identity()) < 1e-12);
        assert_eq!(Pose::identity().compose(&p), p);
    }

    #[test]
    fn umeyama_trivial_cases() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
        ];
        let a = umeyama_sim3(&pts, &pts).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!(a.rotation.geodesic_rad(&UnitQuaternion::identity()) < 1e-9);
        assert!(a.translation.norm() < 1e-12);

        let doubled: Vec<Vec3> = pts.iter().map(|p| p * 2.0).collect();
        let a = umeyama_sim3(&pts, &doubled).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
        assert!(a.rotation.geodesic_rad(&UnitQuaternion::identity()) < 1e-9);
    }

    #[test]
    fn umeyama_rejects_degenerate_sets() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(
            umeyama_sim3(&two, &two),
            Err(Error::DegenerateInput(_))
        ));
        let same = vec![Vec3::x(); 4];
        assert!(matches!(
            umeyama_sim3(&same, &same),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn umeyama_handles_planar_reflection_case() {
        // Mirror image across the xy-plane: best proper rotation is not the
        // reflection, and the result must still be a rotation.
        let src = vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, -1.0),
            Vec3::new(0.0, 1.0, 0.5),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let a = umeyama_sim3(&src, &dst).unwrap();
        assert!((a.rotation.to_matrix().determinant() - 1.0).abs() < 1e-9);
        assert!(a.scale > 0.0);
        assert!(a.sq_error(&src, &dst) <= Sim3Alignment::identity().sq_error(&src, &dst) + 1e-12);
    }
}
