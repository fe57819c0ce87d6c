//! Pinhole camera, rigid/affine transforms and keypoint statistics.
//!
//! World frame: x east, y up, z north. Camera frame: X right, Y up,
//! Z forward, with image `v` growing downward. Angles are in degrees.
//! An azimuth of 0 looks along world +z; positive azimuth turns right
//! (toward +x). Positive elevation tilts the camera up.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfImage {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("bottom row of affine matrix must be (0, 0, 0, 1), got {0:?}")]
    BadBottomRow([f64; 4]),
    #[error("empty keypoint set")]
    EmptyKeypoints,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    if d == 0.0 {
        (0.0, 1.0)
    } else if d == 90.0 {
        (1.0, 0.0)
    } else if d == 180.0 {
        (0.0, -1.0)
    } else if d == 270.0 {
        (-1.0, 0.0)
    } else {
        d.to_radians().sin_cos()
    }
}

/// Rotation about the vertical axis by `deg`; maps +z to (sin, 0, cos).
pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = sin_cos_deg(deg);
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the x axis by `deg`.
pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = sin_cos_deg(deg);
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

fn rigid(rot: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera center in world coordinates.
    pub position: [f64; 3],
    pub azimuth: f64,
    pub elevation: f64,
}

impl CameraModel {
    /// Square-pixel camera with horizontal field of view `hfov` and the
    /// principal point at `(W/2, H/2)`.
    pub fn new(
        width: usize,
        height: usize,
        hfov: f64,
        position: [f64; 3],
        azimuth: f64,
        elevation: f64,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size {width}x{height}"
            )));
        }
        if !(hfov > 0.0 && hfov < 180.0) {
            return Err(GeometryError::InvalidCamera(format!("hfov {hfov}")));
        }
        let focal = (width as f64 / 2.0) / (hfov.to_radians() / 2.0).tan();
        Ok(Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            position,
            azimuth: normalize_deg(azimuth),
            elevation,
        })
    }

    /// Camera-to-world rotation; columns are the right, up and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        rot_y(self.azimuth) * rot_x(-self.elevation)
    }

    /// World-to-camera rigid transform.
    pub fn extrinsic(&self) -> Matrix4<f64> {
        let r = self.rotation().transpose();
        let c = Vector3::from(self.position);
        rigid(r, -(r * c))
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        let r = self.rotation();
        Point3::from(r.transpose() * (p.coords - Vector3::from(self.position)))
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + Vector3::from(self.position))
    }

    /// Camera-frame ray through pixel `(u, v)` scaled to unit Z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.focal, -(v - self.cy) / self.focal, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Camera-frame point seen at pixel `(u, v)` with z-depth `depth`.
// Negated comparisons also reject NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn backproject(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Point3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !cam.contains(u, v) {
        return Err(GeometryError::OutOfImage {
            u,
            v,
            width: cam.width,
            height: cam.height,
        });
    }
    Ok(Point3::from(cam.ray(u, v) * depth))
}

/// Perspective projection of a camera-frame point to `(u, v, depth)`.
/// Points at or behind the camera plane yield `None`.
pub fn project(p: &Point3<f64>, cam: &CameraModel) -> Option<(f64, f64, f64)> {
    if p.z <= 0.0 {
        return None;
    }
    let u = cam.cx + cam.focal * p.x / p.z;
    let v = cam.cy - cam.focal * p.y / p.z;
    Some((u, v, p.z))
}

/// A 4x4 matrix whose bottom row is exactly `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine4(Matrix4<f64>);

impl Affine4 {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        let row = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if row != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::BadBottomRow(row));
        }
        Ok(Self(m))
    }

    /// Builds from the 12 free parameters: row-major 3x3 block, then translation.
    pub fn from_params(p: &[f64; 12]) -> Self {
        Self(Matrix4::new(
            p[0], p[1], p[2], p[9], p[3], p[4], p[5], p[10], p[6], p[7], p[8], p[11], 0.0, 0.0,
            0.0, 1.0,
        ))
    }

    /// Inverse of [`Affine4::from_params`].
    pub fn params(&self) -> [f64; 12] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
            m[(0, 3)],
            m[(1, 3)],
            m[(2, 3)],
        ]
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self(rigid(Matrix3::identity(), Vector3::from(t)))
    }

    pub fn rigid(rot: Matrix3<f64>, t: [f64; 3]) -> Self {
        Self(rigid(rot, Vector3::from(t)))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Affine4) -> Affine4 {
        let mut m = self.0 * other.0;
        // Keep the invariant exact despite rounding.
        m.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        Affine4(m)
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear() * p.coords + self.translation_part())
    }
}

/// Maps each point through `m`.
pub fn apply_affine(points: &[Point3<f64>], m: &Affine4) -> Vec<Point3<f64>> {
    points.iter().map(|p| m.transform(p)).collect()
}

/// Planar object pose: position of the footprint center on the floor and
/// yaw about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl ObjectPose {
    pub fn new(position: [f64; 3], yaw: f64) -> Self {
        Self {
            position,
            yaw: normalize_deg(yaw),
        }
    }

    /// Object-to-world rigid transform.
    pub fn matrix(&self) -> Matrix4<f64> {
        rigid(rot_y(self.yaw), Vector3::from(self.position))
    }
}

/// Transform taking camera-frame points attached to the object at step t
/// to their camera-frame location at step t+1, i.e. `E1 * W * E0^-1` with
/// `W` the object's world-frame motion.
///
/// Evaluated in closed form from relative angles so that a static camera
/// and a static object give the identity exactly.
pub fn ground_truth_affine(
    obj_t: &ObjectPose,
    obj_t1: &ObjectPose,
    cam_t: &CameraModel,
    cam_t1: &CameraModel,
) -> Affine4 {
    let dyaw = obj_t1.yaw - obj_t.yaw;
    let r_w = rot_y(dyaw);
    // R1^T Rw R0 = Rx(e1) Ry(a0 + dyaw - a1) Rx(-e0)
    let beta = cam_t.azimuth + dyaw - cam_t1.azimuth;
    let lin = if normalize_deg(beta) == 0.0 {
        rot_x(cam_t1.elevation - cam_t.elevation)
    } else {
        rot_x(cam_t1.elevation) * rot_y(beta) * rot_x(-cam_t.elevation)
    };
    let (c0, c1) = (Vector3::from(cam_t.position), Vector3::from(cam_t1.position));
    let (p0, p1) = (Vector3::from(obj_t.position), Vector3::from(obj_t1.position));
    let t = cam_t1.rotation().transpose() * (r_w * (c0 - p0) + (p1 - c1));
    Affine4(rigid(lin, t))
}

/// Componentwise mean of a keypoint set.
pub fn keypoint_center(points: &[Point3<f64>]) -> Result<Point3<f64>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyKeypoints);
    }
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Ok(Point3::from(sum / points.len() as f64))
}
