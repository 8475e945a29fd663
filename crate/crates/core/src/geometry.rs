//! Rigid poses, 6D rotation decoding, pinhole projection and the 4D
//! target-pose feature fed to the view MLPs.
//!
//! Convention: a world-to-camera pose maps `X_c = R·X_w + t`; the camera
//! looks down +z with +x right and +y down (image rows grow downward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::linalg::{self, Mat3, Vec3, IDENTITY3};

/// Norm below which a 6D column is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Offset inside the log of the pose distance.
pub const LOG_DISTANCE_EPS: f64 = 1e-6;
/// Minimum camera-space depth accepted by [`project`].
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation input")]
    DegenerateInput,
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("matrix is not a proper rotation (orthonormality error {ortho_err:e}, det {det})")]
    InvalidRotation { ortho_err: f64, det: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseW2C {
    r: Mat3,
    t: Vec3,
}

impl PoseW2C {
    pub fn new(r: Mat3, t: Vec3) -> Result<Self, GeometryError> {
        let rtr = linalg::mat_mul(&linalg::transpose(&r), &r);
        let mut ortho_err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                ortho_err = ortho_err.max((rtr[i][j] - target).abs());
            }
        }
        let det = linalg::det3(&r);
        if ortho_err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { ortho_err, det });
        }
        Ok(Self { r, t })
    }

    pub fn identity() -> Self {
        Self {
            r: IDENTITY3,
            t: [0.0; 3],
        }
    }

    pub fn from_6d(v6: &[f64; 6], t: Vec3) -> Result<Self, GeometryError> {
        Ok(Self {
            r: rotation_from_6d(v6)?,
            t,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let fwd = linalg::sub(&target, &eye);
        let fwd = normalize(&fwd).ok_or(GeometryError::DegenerateInput)?;
        let right = normalize(&linalg::cross(&fwd, &up)).ok_or(GeometryError::DegenerateInput)?;
        let down = linalg::cross(&fwd, &right);
        let r = [right, down, fwd];
        let t = linalg::scale(&linalg::mat_vec(&r, &eye), -1.0);
        Self::new(r, t)
    }

    /// A bitwise fixed point of the 6D round trip, within rounding of `self`.
    /// Poses stored this way reproduce exactly when re-parameterised.
    pub fn canonical(&self) -> Self {
        let mut p = *self;
        for _ in 0..8 {
            match Self::from_6d(&p.to_6d(), p.t) {
                Ok(q) if q == p => break,
                Ok(q) => p = q,
                Err(_) => break,
            }
        }
        p
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    /// First two columns of `R`, the 6D latent that decodes back to `R`.
    pub fn to_6d(&self) -> [f64; 6] {
        [
            self.r[0][0],
            self.r[1][0],
            self.r[2][0],
            self.r[0][1],
            self.r[1][1],
            self.r[2][1],
        ]
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        linalg::add(&linalg::mat_vec(&self.r, p), &self.t)
    }

    pub fn center(&self) -> Vec3 {
        camera_center(self)
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.r;
        let t = &self.t;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        let r = std::array::from_fn(|i| [m[i][0], m[i][1], m[i][2]]);
        Self::new(r, [m[0][3], m[1][3], m[2][3]])
    }

    /// Rotation angle of `R_self · R_otherᵀ` in degrees.
    pub fn rotation_error_deg(&self, other: &PoseW2C) -> f64 {
        let rel = linalg::mat_mul(&self.r, &linalg::transpose(&other.r));
        let tr = rel[0][0] + rel[1][1] + rel[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

fn normalize(v: &Vec3) -> Option<Vec3> {
    let n = linalg::norm(v);
    (n > DEGENERATE_NORM).then(|| linalg::scale(v, 1.0 / n))
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square pixels, principal point at the image centre.
    pub fn from_fov_y(width: u32, height: u32, fov_y_deg: f64) -> Result<Self, GeometryError> {
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if self.width < 1 || self.height < 1 {
            return Err(GeometryError::InvalidCamera("image size must be at least 1x1"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidCamera("principal point must be finite"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Distance encoding of the pose feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    #[default]
    Log,
    Linear,
}

impl std::str::FromStr for PoseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log" => Ok(Self::Log),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown pose mode '{other}' (expected log|linear)")),
        }
    }
}

impl std::fmt::Display for PoseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Log => "log",
            Self::Linear => "linear",
        })
    }
}

/// Unit viewing direction plus encoded distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewFeature4D {
    pub u: Vec3,
    pub l: f64,
}

impl ViewFeature4D {
    pub fn as_array(&self) -> [f64; 4] {
        [self.u[0], self.u[1], self.u[2], self.l]
    }
}

/// Gram–Schmidt decode of two 3-vectors into a rotation whose columns are
/// `(b1, b2, b1 × b2)`.
pub fn rotation_from_6d(v6: &[f64; 6]) -> Result<Mat3, GeometryError> {
    rotation_from_6d_generic(v6).ok_or(GeometryError::DegenerateInput)
}

pub(crate) fn rotation_from_6d_generic<T: Real>(v6: &[T; 6]) -> Option<[[T; 3]; 3]> {
    let a1 = [v6[0], v6[1], v6[2]];
    let a2 = [v6[3], v6[4], v6[5]];
    let n1 = linalg::norm(&a1);
    if n1.value() <= DEGENERATE_NORM {
        return None;
    }
    let b1 = linalg::scale(&a1, n1.lift(1.0) / n1);
    let proj = linalg::dot(&a2, &b1);
    let resid = linalg::sub(&a2, &linalg::scale(&b1, proj));
    let n2 = linalg::norm(&resid);
    if n2.value() <= DEGENERATE_NORM {
        return None;
    }
    let b2 = linalg::scale(&resid, n2.lift(1.0) / n2);
    let b3 = linalg::cross(&b1, &b2);
    Some([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// World position of the camera, `C = −Rᵀt`.
pub fn camera_center(pose: &PoseW2C) -> Vec3 {
    center_generic(&pose.r, &pose.t)
}

pub(crate) fn center_generic<T: Real>(r: &[[T; 3]; 3], t: &[T; 3]) -> [T; 3] {
    let c = linalg::mat_t_vec(r, t);
    [-c[0], -c[1], -c[2]]
}

pub fn pose_feature_4d(mu: &Vec3, pose: &PoseW2C, mode: PoseMode) -> ViewFeature4D {
    let (u, l) = pose_feature_generic(mu, &camera_center(pose), mode);
    ViewFeature4D { u, l }
}

/// `d = C − μ`, `u = d/‖d‖`, `l = log(‖d‖ + ε)` (or `‖d‖` in linear mode).
/// Zero distance falls back to `u = +z` and the distance floor.
pub(crate) fn pose_feature_generic<T: Real>(mu: &[T; 3], center: &[T; 3], mode: PoseMode) -> ([T; 3], T) {
    let d = linalg::sub(center, mu);
    let n2 = linalg::dot(&d, &d);
    let zero = n2.lift(0.0);
    if n2.value().sqrt() < DEGENERATE_NORM {
        let l = match mode {
            PoseMode::Log => zero.lift(LOG_DISTANCE_EPS.ln()),
            PoseMode::Linear => zero,
        };
        return ([zero, zero, zero.lift(1.0)], l);
    }
    let n = n2.sqrt();
    let u = linalg::scale(&d, n.lift(1.0) / n);
    let l = match mode {
        PoseMode::Log => (n + LOG_DISTANCE_EPS).ln(),
        PoseMode::Linear => n,
    };
    (u, l)
}

/// Pinhole projection of a world point to pixel coordinates.
pub fn project(cam: &CameraModel, pose: &PoseW2C, point: &Vec3) -> Result<[f64; 2], GeometryError> {
    let pc = pose.transform(point);
    if pc[2] <= MIN_PROJECT_DEPTH {
        return Err(GeometryError::BehindCamera { depth: pc[2] });
    }
    Ok(project_camera_space(cam, &pc))
}

pub(crate) fn project_camera_space<T: Real>(cam: &CameraModel, pc: &[T; 3]) -> [T; 2] {
    let inv_z = pc[2].lift(1.0) / pc[2];
    [
        pc[0] * inv_z * cam.fx + cam.cx,
        pc[1] * inv_z * cam.fy + cam.cy,
    ]
}
