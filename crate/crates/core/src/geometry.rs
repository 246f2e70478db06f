//! Rigid-body transforms, the se(3) exponential/logarithm, and the pinhole
//! camera model in inverse-depth form.
//!
//! Twists are ordered `(translational, rotational)` throughout and pose
//! updates are applied on the left: `P <- exp(xi) * P`.

use std::ops::Mul;

use nalgebra::{Matrix2x4, Matrix3, Matrix3x6, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points with a camera-frame depth at or below this are treated as behind the camera.
pub const DEFAULT_EPSILON_Z: f64 = 1e-6;

/// Rotation angles closer than this to pi are rejected by [`se3_log`].
pub const BRANCH_CUT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("rotation angle {angle} is at the logarithm branch cut")]
    AngleAtBranchCut { angle: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
}

/// An element of SE(3) stored as a unit quaternion and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies the transform to a homogeneous point; `w` scales the translation.
    pub fn transform_homo(&self, p: &HomoPoint) -> HomoPoint {
        let xyz = self.rotation * p.xyz() + self.translation * p.w;
        HomoPoint::new(xyz.x, xyz.y, xyz.z, p.w)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub translational: Vector3<f64>,
    pub rotational: Vector3<f64>,
}

impl Twist {
    pub fn new(translational: Vector3<f64>, rotational: Vector3<f64>) -> Self {
        Self { translational, rotational }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            translational: Vector3::new(v[0], v[1], v[2]),
            rotational: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let (r, w) = (&self.translational, &self.rotational);
        Vector6::new(r.x, r.y, r.z, w.x, w.y, w.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    // sin(theta/2) / theta
    let k = if theta < 1e-4 {
        0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
    } else {
        half.sin() / theta
    };
    let q = Quaternion::new(half.cos(), k * omega.x, k * omega.y, k * omega.z);
    UnitQuaternion::new_normalize(q)
}

fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vnorm = v.norm();
    if vnorm < 1e-8 {
        // 2 atan(n / w) / n around n = 0
        let k = 2.0 / w * (1.0 - vnorm * vnorm / (3.0 * w * w));
        v * k
    } else {
        let theta = 2.0 * vnorm.atan2(w);
        v * (theta / vnorm)
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let t4 = theta2 * theta2;
    let a = if theta < 1e-4 {
        0.5 - theta2 / 24.0 + t4 / 720.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / theta2
    };
    let b = if theta < 0.1 {
        1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0 - t4 * theta2 / 362880.0
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + w * a + w * w * b
}

fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let t4 = theta2 * theta2;
    let c = if theta < 0.1 {
        1.0 / 12.0 + theta2 / 720.0 + t4 / 30240.0 + t4 * theta2 / 1209600.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rotation = so3_exp(&xi.rotational);
    let translation = so3_left_jacobian(&xi.rotational) * xi.translational;
    Pose { rotation, translation }
}

pub fn se3_log(p: &Pose) -> Result<Twist, GeometryError> {
    let angle = p.angle();
    if (std::f64::consts::PI - angle).abs() <= BRANCH_CUT_TOLERANCE {
        return Err(GeometryError::AngleAtBranchCut { angle });
    }
    let rotational = so3_log(&p.rotation);
    let translational = so3_left_jacobian_inverse(&rotational) * p.translation;
    Ok(Twist { translational, rotational })
}

/// Adjoint of `p` acting on `(translational, rotational)` twists, so that
/// `exp(Adj_p xi) = p exp(xi) p^-1`.
pub fn se3_adjoint(p: &Pose) -> Matrix6<f64> {
    let r = p.rotation_matrix();
    let mut adj = Matrix6::zeros();
    adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&p.translation) * r));
    adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    adj
}

/// Derivative of `exp(xi) * X` at `xi = 0` for a homogeneous point, restricted
/// to the first three coordinates (the fourth is constant).
pub fn generator_action(p: &HomoPoint) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * p.w));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p.xyz())));
    m
}

/// Homogeneous point `(x, y, z, w)`; `w` carries inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomoPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl HomoPoint {
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self { x, y, z, w }
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Euclidean point, `None` at infinity.
    pub fn euclidean(&self) -> Option<Vector3<f64>> {
        (self.w != 0.0).then(|| self.xyz() / self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidIntrinsics(msg.to_owned()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// True when `(u, v)` lies inside the pixel-center extent of the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

pub fn unproject(intr: &Intrinsics, u: f64, v: f64, inv_depth: f64) -> HomoPoint {
    HomoPoint::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0, inv_depth)
}

pub fn project(intr: &Intrinsics, p: &HomoPoint, epsilon_z: f64) -> Result<[f64; 2], GeometryError> {
    if !(p.z > epsilon_z) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok([intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy])
}

pub fn project_jacobian(intr: &Intrinsics, p: &HomoPoint, epsilon_z: f64) -> Result<Matrix2x4<f64>, GeometryError> {
    if !(p.z > epsilon_z) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    let iz = 1.0 / p.z;
    Ok(Matrix2x4::new(
        intr.fx * iz,
        0.0,
        -intr.fx * p.x * iz * iz,
        0.0,
        0.0,
        intr.fy * iz,
        -intr.fy * p.y * iz * iz,
        0.0,
    ))
}

/// Transform taking frame `i` camera coordinates to frame `j` camera
/// coordinates, `(P_tj T_cj)^-1 P_ti T_ci`.
pub fn relative_pose(p_ti: &Pose, p_tj: &Pose, t_ci: &Pose, t_cj: &Pose) -> Pose {
    (p_tj * t_cj).inverse() * (p_ti * t_ci)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-rig transform.
    pub extrinsic: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<Camera>,
    pub reference_camera: usize,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>, reference_camera: usize) -> Result<Self, GeometryError> {
        if cameras.is_empty() {
            return Err(GeometryError::InvalidRig("rig needs at least one camera".into()));
        }
        if reference_camera >= cameras.len() {
            return Err(GeometryError::InvalidRig(format!(
                "reference camera {reference_camera} out of range for {} cameras",
                cameras.len()
            )));
        }
        for cam in &cameras {
            cam.intrinsics.validate()?;
        }
        Ok(Self { cameras, reference_camera })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, c: usize) -> &Camera {
        &self.cameras[c]
    }

    /// Optical axis of camera `c` expressed in the rig frame.
    pub fn optical_axis(&self, c: usize) -> Vector3<f64> {
        self.cameras[c].extrinsic.rotation * Vector3::z()
    }

    /// Absolute yaw between camera `c` and the reference camera, measured
    /// about the reference camera's vertical (y) axis.
    pub fn yaw_from_reference(&self, c: usize) -> f64 {
        let reference = self.cameras[self.reference_camera].extrinsic.rotation;
        let axis = reference.inverse() * self.optical_axis(c);
        axis.x.atan2(axis.z).abs()
    }
}
