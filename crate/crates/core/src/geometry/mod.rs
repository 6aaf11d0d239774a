//! Pinhole cameras and rigid transforms.
//!
//! Conventions used everywhere in the crate:
//!
//! * Integer pixel `(i, j)` samples the continuous coordinate `(i, j)`; there is
//!   no half-pixel offset.
//! * Camera frames are right-handed with `+z` forward, `+x` right and `+y` down.
//! * A [`CameraModel`] pose maps camera coordinates to world coordinates.

pub mod spline;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold on the homogeneous coordinate below which a point is treated as
/// lying on (or behind) the camera plane.
pub const DEFAULT_EPS_W: f64 = 1e-8;

/// Orthonormality tolerance required of rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate depth: |w| = {0} is at or below the camera plane threshold")]
    DegenerateDepth(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) is outside the image")]
    OutOfBounds { u: f64, v: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (error {0:e})")]
    NotARotation(f64),
    #[error("axis must be non-zero and finite")]
    BadAxis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Pinhole intrinsics in pixel units together with the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
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

    /// Intrinsics with the principal point at the geometric image center
    /// `((w - 1) / 2, (h - 1) / 2)`, which keeps the pixel grid mirror-symmetric.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// True when `px` lies within the image plus a half-pixel margin.
    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= -0.5
            && px.v >= -0.5
            && px.u <= self.width as f64 - 0.5
            && px.v <= self.height as f64 - 0.5
    }
}

/// An element of SE(3): `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = rotation_error(&rotation);
        if !(err <= ROTATION_TOL) || !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Like [`RigidTransform::new`] but projects a nearly orthonormal matrix onto
    /// SO(3) first. Matrices further than `tol` from a rotation are rejected.
    pub fn new_orthonormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        let err = rotation_error(&rotation);
        if !(err <= tol) {
            return Err(GeometryError::NotARotation(err));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        if rotation_error(&r) > ROTATION_TOL {
            r = Rotation3::from_matrix(&r).into_inner();
        }
        Self::new(r, translation)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation by `angle_rad` about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Result<Self, GeometryError> {
        let norm = axis.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GeometryError::BadAxis);
        }
        let axis = Unit::new_unchecked(axis / norm);
        Ok(Self {
            rotation: Rotation3::from_axis_angle(&axis, angle_rad).into_inner(),
            translation: Vector3::zeros(),
        })
    }

    pub fn rot_x(angle_rad: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle_rad).unwrap()
    }

    pub fn rot_y(angle_rad: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle_rad).unwrap()
    }

    pub fn rot_z(angle_rad: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle_rad).unwrap()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.translation = t;
        self
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        Point3::from_vector(&(self.rotation * p.to_vector() + self.translation))
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Largest absolute entry-wise difference, used for tolerance checks.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }

    /// Conjugates the transform so that its rotation acts about `pivot`.
    pub fn about_pivot(&self, pivot: &Vector3<f64>) -> RigidTransform {
        let to_origin = RigidTransform::from_translation(-pivot.x, -pivot.y, -pivot.z);
        let back = RigidTransform::from_translation(pivot.x, pivot.y, pivot.z);
        back.compose(self).compose(&to_origin)
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

/// `max(|RᵀR − I|, |det R − 1|)`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    let e = ortho.max(det);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// `π([u, v, w]ᵀ) = [u / w, v / w]ᵀ`.
pub fn perspective_divide(p: [f64; 3]) -> Result<Pixel, GeometryError> {
    perspective_divide_eps(p, DEFAULT_EPS_W)
}

pub fn perspective_divide_eps(p: [f64; 3], eps_w: f64) -> Result<Pixel, GeometryError> {
    let [u, v, w] = p;
    if !(w.abs() > eps_w) {
        return Err(GeometryError::DegenerateDepth(w));
    }
    Ok(Pixel::new(u / w, v / w))
}

/// Lifts a pixel with metric depth to a camera-frame point.
pub fn backproject(px: Pixel, depth: f64, k: &Intrinsics) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !k.contains(px) {
        return Err(GeometryError::OutOfBounds { u: px.u, v: px.v });
    }
    Ok(backproject_unchecked(px, depth, k))
}

#[inline]
pub(crate) fn backproject_unchecked(px: Pixel, depth: f64, k: &Intrinsics) -> Point3 {
    Point3::new(
        (px.u - k.cx) * depth / k.fx,
        (px.v - k.cy) * depth / k.fy,
        depth,
    )
}

/// Projects a camera-frame point. The result may fall outside the image.
pub fn project(p: Point3, k: &Intrinsics) -> Result<Pixel, GeometryError> {
    if !(p.z > DEFAULT_EPS_W) {
        return Err(GeometryError::DegenerateDepth(p.z));
    }
    perspective_divide([k.fx * p.x + k.cx * p.z, k.fy * p.y + k.cy * p.z, p.z])
}

pub fn transform_point(t: &RigidTransform, p: Point3) -> Point3 {
    t.transform_point(p)
}

pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

/// Intrinsics plus a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub pose: RigidTransform,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, pose: RigidTransform) -> Self {
        Self { intrinsics, pose }
    }

    /// Transform taking points in this camera's frame into `other`'s frame.
    pub fn relative_to(&self, other: &CameraModel) -> RigidTransform {
        other.pose.invert().compose(&self.pose)
    }

    pub fn center(&self) -> Vector3<f64> {
        *self.pose.translation()
    }

    /// The camera orbited by `yaw_rad` about the world-vertical axis through `pivot`.
    pub fn orbit_yaw(&self, pivot: &Vector3<f64>, yaw_rad: f64) -> CameraModel {
        let rot = RigidTransform::rot_y(yaw_rad).about_pivot(pivot);
        CameraModel {
            intrinsics: self.intrinsics,
            pose: rot.compose(&self.pose),
        }
    }
}

/// On-disk camera record: pose is camera-to-world, rotation row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&CameraModel> for CameraJson {
    fn from(cam: &CameraModel) -> Self {
        let k = cam.intrinsics;
        let t = cam.pose.translation();
        CameraJson {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: cam.pose.rotation_row_major(),
            translation: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<&CameraJson> for CameraModel {
    type Error = GeometryError;

    fn try_from(j: &CameraJson) -> Result<Self, Self::Error> {
        let k = Intrinsics::new(j.fx, j.fy, j.cx, j.cy, j.width, j.height)?;
        let r = Matrix3::from_row_slice(&j.rotation);
        let t = Vector3::from_row_slice(&j.translation);
        // Hand-written files rarely carry full double precision.
        let pose = match RigidTransform::new(r, t) {
            Ok(p) => p,
            Err(_) => RigidTransform::new_orthonormalized(r, t, 1e-4)?,
        };
        Ok(CameraModel::new(k, pose))
    }
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CameraJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = CameraJson::deserialize(d)?;
        CameraModel::try_from(&j).map_err(serde::de::Error::custom)
    }
}
