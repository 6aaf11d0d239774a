//! Catmull-Rom translation splines and quaternion slerp.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::RigidTransform;

/// Uniform Catmull-Rom spline through `points`.
///
/// End tangents come from reflected phantom points (`p₋₁ = 2p₀ − p₁`), so a
/// two-point spline is exactly the straight segment between them.
#[derive(Debug, Clone)]
pub struct CatmullRom {
    points: Vec<Vector3<f64>>,
}

impl CatmullRom {
    pub fn new(points: Vec<Vector3<f64>>) -> Option<Self> {
        (!points.is_empty()).then_some(Self { points })
    }

    fn knot(&self, i: isize) -> Vector3<f64> {
        let n = self.points.len() as isize;
        if n == 1 {
            return self.points[0];
        }
        if i < 0 {
            2.0 * self.points[0] - self.points[1]
        } else if i >= n {
            2.0 * self.points[(n - 1) as usize] - self.points[(n - 2) as usize]
        } else {
            self.points[i as usize]
        }
    }

    /// Evaluates at global parameter `s ∈ [0, 1]` spanning all segments.
    pub fn eval(&self, s: f64) -> Vector3<f64> {
        let segments = self.points.len().saturating_sub(1);
        if segments == 0 {
            return self.points[0];
        }
        let x = s.clamp(0.0, 1.0) * segments as f64;
        let seg = (x.floor() as usize).min(segments - 1);
        let t = x - seg as f64;
        let i = seg as isize;
        let (p0, p1, p2, p3) = (self.knot(i - 1), self.knot(i), self.knot(i + 1), self.knot(i + 2));
        let m1 = (p2 - p0) * 0.5;
        let m2 = (p3 - p1) * 0.5;
        let t2 = t * t;
        let t3 = t2 * t;
        p1 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m1 * (t3 - 2.0 * t2 + t)
            + p2 * (-2.0 * t3 + 3.0 * t2)
            + m2 * (t3 - t2)
    }

    /// Time derivative with respect to the per-segment parameter.
    pub fn derivative(&self, s: f64) -> Vector3<f64> {
        let segments = self.points.len().saturating_sub(1);
        if segments == 0 {
            return Vector3::zeros();
        }
        let x = s.clamp(0.0, 1.0) * segments as f64;
        let seg = (x.floor() as usize).min(segments - 1);
        let t = x - seg as f64;
        let i = seg as isize;
        let (p0, p1, p2, p3) = (self.knot(i - 1), self.knot(i), self.knot(i + 1), self.knot(i + 2));
        let m1 = (p2 - p0) * 0.5;
        let m2 = (p3 - p1) * 0.5;
        let t2 = t * t;
        p1 * (6.0 * t2 - 6.0 * t) + m1 * (3.0 * t2 - 4.0 * t + 1.0) + p2 * (-6.0 * t2 + 6.0 * t) + m2 * (3.0 * t2 - 2.0 * t)
    }
}

pub fn quaternion_of(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Geodesic interpolation between two rotations.
pub fn slerp_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let qa = quaternion_of(a);
    let mut qb = quaternion_of(b);
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
    q.to_rotation_matrix().into_inner()
}

/// Slerp for the rotation and a linear segment for the translation.
pub fn interpolate_transform(a: &RigidTransform, b: &RigidTransform, t: f64) -> RigidTransform {
    let r = slerp_rotation(a.rotation(), b.rotation(), t);
    let tr = a.translation() * (1.0 - t) + b.translation() * t;
    RigidTransform::new_orthonormalized(r, tr, 1e-6).expect("slerp of rotations is a rotation")
}
