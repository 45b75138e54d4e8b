//! Domain types and basic 3D geometry shared by every other module.
//!
//! Orientation is always stored as a rotation matrix whose columns are the
//! gripper's approach, closing and finger axes. Euler angles only appear at
//! the I/O boundary and follow the intrinsic Z-Y'-X'' convention:
//! `R = Rz(theta) * Ry(gamma) * Rx(beta)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality tolerance applied when a rotation enters the library.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Unit-length tolerance for normals and view vectors.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// Below this value of `cos(gamma)` the Euler decomposition is treated as
/// gimbal-locked and `beta` is pinned to zero.
const GIMBAL_EPS: f64 = 1e-9;

/// A 6-DoF parallel-jaw grasp.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspPose {
    pub center: Vec3,
    /// Columns: approach axis, closing axis, finger axis.
    pub rotation: Mat3,
    pub width: f64,
    /// Advance of the fingertips past `center` along the approach axis.
    pub depth: f64,
    pub score: f64,
    pub object_id: Option<u32>,
}

impl GraspPose {
    pub fn approach(&self) -> Vec3 {
        self.rotation.column(0).into_owned()
    }

    pub fn closing(&self) -> Vec3 {
        self.rotation.column(1).into_owned()
    }

    /// Coordinates of a world point in the gripper frame.
    #[inline]
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        to_frame(&self.rotation, &self.center, p)
    }

    pub fn validate(&self, max_width: f64) -> Result<()> {
        check_rotation(&self.rotation, ROTATION_TOLERANCE)?;
        if !(self.width >= 0.0 && self.width <= max_width) {
            return Err(Error::InvalidArgument(format!(
                "grasp width {} outside [0, {max_width}]",
                self.width
            )));
        }
        if !(self.depth >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grasp depth {} is negative",
                self.depth
            )));
        }
        Ok(())
    }
}

/// `rotation^T (p - origin)`, the one place frame changes are computed so
/// that every caller gets bit-identical local coordinates.
#[inline]
pub fn to_frame(rotation: &Mat3, origin: &Vec3, p: &Vec3) -> Vec3 {
    rotation.tr_mul(&(p - origin))
}

/// Row-major per-point feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub width: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A point cloud with per-point object ids (0 is the table/background).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub points: Vec<Vec3>,
    pub object_ids: Vec<u32>,
    /// Unit vectors, or the exact zero vector for an invalid normal.
    pub normals: Option<Vec<Vec3>>,
    pub features: Option<Features>,
}

impl Scene {
    pub fn new(points: Vec<Vec3>, object_ids: Vec<u32>) -> Result<Self> {
        let scene = Scene {
            points,
            object_ids,
            normals: None,
            features: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        self.normals = Some(normals);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Position-plus-normal features `[x, y, z, nx, ny, nz]`.
    pub fn position_normal_features(&self) -> Result<Features> {
        let normals = self
            .normals
            .as_ref()
            .ok_or_else(|| Error::Missing("scene normals".into()))?;
        let mut data = Vec::with_capacity(self.len() * 6);
        for (p, n) in self.points.iter().zip(normals) {
            data.extend_from_slice(&[p.x, p.y, p.z, n.x, n.y, n.z]);
        }
        Ok(Features { width: 6, data })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.object_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} object ids for {n} points",
                self.object_ids.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !is_finite(p)) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::Shape(format!("{} normals for {n} points", normals.len())));
            }
            for (i, v) in normals.iter().enumerate() {
                if !is_finite(v) {
                    return Err(Error::NonFinite(format!("normal {i}")));
                }
                if !is_valid_normal(v) && *v != Vec3::zeros() {
                    return Err(Error::InvalidArgument(format!(
                        "normal {i} has length {}",
                        v.norm()
                    )));
                }
            }
        }
        if let Some(f) = &self.features {
            if f.width == 0 || f.data.len() != n * f.width {
                return Err(Error::Shape(format!(
                    "feature buffer of {} values for {n} points of width {}",
                    f.data.len(),
                    f.width
                )));
            }
            if f.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("features".into()));
            }
        }
        Ok(())
    }
}

pub fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

pub fn is_valid_normal(n: &Vec3) -> bool {
    (n.norm() - 1.0).abs() <= UNIT_TOLERANCE
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy];
        if all.iter().any(|v| !v.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")));
        }
        if self.cx < 0.0 || self.cy < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Point on the pixel ray at unit depth.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Continuous pixel coordinates of a camera-frame point; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Organized depth map in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `depth[v * width + u]`.
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let img = DepthImage {
            width,
            height,
            depth,
            intrinsics,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, value: f64, intrinsics: Intrinsics) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], intrinsics)
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.depth.len() != self.width * self.height {
            return Err(Error::Shape(format!(
                "{} depth values for a {}x{} image",
                self.depth.len(),
                self.width,
                self.height
            )));
        }
        if self.depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument("depth values must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Binary image mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, inside: bool) {
        self.data[v * self.width + u] = inside;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape("mask sizes differ".into()));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Seed points selected for grasp regression, each with an approach view.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    pub indices: Vec<usize>,
    pub views: Vec<Vec3>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, point_count: usize) -> Result<()> {
        if self.indices.len() != self.views.len() {
            return Err(Error::Shape("seed indices and views differ in length".into()));
        }
        let mut seen = vec![false; point_count];
        for &i in &self.indices {
            if i >= point_count {
                return Err(Error::InvalidArgument(format!("seed index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("duplicate seed index {i}")));
            }
        }
        if self.views.iter().any(|v| !is_valid_normal(v)) {
            return Err(Error::InvalidArgument("seed views must be unit vectors".into()));
        }
        Ok(())
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Intrinsic Z-Y'-X'' Euler angles to a rotation matrix.
pub fn euler_to_rotation(theta: f64, gamma: f64, beta: f64) -> Mat3 {
    rot_z(theta) * rot_y(gamma) * rot_x(beta)
}

/// Inverse of [`euler_to_rotation`]. At gimbal lock (`gamma = ±π/2`) the
/// third angle is set to 0 and the whole yaw is carried by `theta`.
pub fn rotation_to_euler(r: &Mat3) -> Result<(f64, f64, f64)> {
    check_rotation(r, ROTATION_TOLERANCE)?;
    let cos_gamma = r[(0, 0)].hypot(r[(1, 0)]);
    let gamma = (-r[(2, 0)]).atan2(cos_gamma);
    if cos_gamma < GIMBAL_EPS {
        let theta = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return Ok((theta, gamma, 0.0));
    }
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    let beta = r[(2, 1)].atan2(r[(2, 2)]);
    Ok((theta, gamma, beta))
}

/// Errors unless `r` is orthonormal with determinant +1 within `tol`
/// (max-abs entry of `R^T R - I`).
pub fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let err = (r.transpose() * r - Mat3::identity()).amax();
    if err > tol {
        return Err(Error::InvalidRotation(format!("orthonormality error {err:.3e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol.max(1e-12) * 3.0 {
        return Err(Error::InvalidRotation(format!("determinant {det}")));
    }
    Ok(())
}

/// Gripper frame whose approach axis is `approach`, rotated in-plane by
/// `angle` about it. With `angle = 0` the closing axis is horizontal
/// (perpendicular to world z) whenever the approach is not vertical.
pub fn approach_rotation(approach: &Vec3, angle: f64) -> Mat3 {
    let x = approach.normalize();
    let mut y = Vec3::new(-x.y, x.x, 0.0);
    if y.norm() < 1e-12 {
        y = Vec3::new(0.0, 1.0, 0.0);
    }
    let y = y.normalize();
    let z = x.cross(&y);
    Mat3::from_columns(&[x, y, z]) * rot_x(angle)
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.tr_mul(b)).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// `n` near-uniform unit vectors on the sphere from the Fibonacci lattice,
/// ordered from the north pole (+z) downward.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Result of back-projecting a depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprojection {
    pub points: Vec<Vec3>,
    /// `(u, v)` of each point.
    pub pixels: Vec<(usize, usize)>,
    /// Point index for each pixel (row-major), `None` for invalid pixels.
    pub pixel_to_point: Vec<Option<usize>>,
}

/// Back-projects every pixel with positive depth, scanning rows top to bottom.
pub fn backproject(d: &DepthImage) -> Backprojection {
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut pixel_to_point = vec![None; d.width * d.height];
    for v in 0..d.height {
        for u in 0..d.width {
            let z = d.at(u, v);
            if z > 0.0 {
                pixel_to_point[v * d.width + u] = Some(points.len());
                points.push(d.intrinsics.backproject(u as f64, v as f64, z));
                pixels.push((u, v));
            }
        }
    }
    Backprojection {
        points,
        pixels,
        pixel_to_point,
    }
}
