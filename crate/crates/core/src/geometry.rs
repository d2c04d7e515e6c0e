//! Rigid transforms, pinhole projection, reprojection errors and the pose loss.
//!
//! A [`Pose`] maps scene coordinates into the camera frame (`x = R y + t`),
//! i.e. it is the *scene* pose. Camera pose errors are always measured on the
//! inverse of this transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reprojection errors are saturated at this many pixels.
pub const DEFAULT_ERROR_CAP: f64 = 100.0;

/// Depth below which a transformed point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn identity3<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Unit quaternion `[w, x, y, z]` for an axis-angle vector.
pub fn quat_from_axis_angle<T: Real>(theta: Vec3<T>) -> [T; 4] {
    let angle = norm3(theta);
    let half = angle * T::lit(0.5);
    // sin(a/2)/a, with its Taylor expansion near zero
    let k = if angle < T::lit(1e-4) {
        T::lit(0.5) - angle * angle / T::lit(48.0)
    } else {
        half.sin() / angle
    };
    [half.cos(), theta[0] * k, theta[1] * k, theta[2] * k]
}

/// Axis-angle vector with angle in `[0, pi]` for a (not necessarily unit) quaternion.
pub fn axis_angle_from_quat<T: Real>(q: [T; 4]) -> Vec3<T> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let mut q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    if q[0] < T::zero() {
        q = [-q[0], -q[1], -q[2], -q[3]];
    }
    let s = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let angle = T::lit(2.0) * s.atan2(q[0]);
    let k = if s < T::lit(1e-8) {
        // angle / sin(angle/2) -> 2 as angle -> 0
        T::lit(2.0) / q[0]
    } else {
        angle / s
    };
    [q[1] * k, q[2] * k, q[3] * k]
}

pub fn quat_mul<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj<T: Real>(q: [T; 4]) -> [T; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rodrigues' formula.
pub fn rotation_matrix<T: Real>(theta: Vec3<T>) -> Mat3<T> {
    let q = quat_from_axis_angle(theta);
    matrix_from_quat(q)
}

pub fn matrix_from_quat<T: Real>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Quaternion of a rotation matrix (Shepperd's method).
pub fn quat_from_matrix<T: Real>(m: &Mat3<T>) -> [T; 4] {
    let one = T::one();
    let quarter = T::lit(0.25);
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * T::lit(2.0);
        [
            quarter * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
        [
            (m[2][1] - m[1][2]) / s,
            quarter * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            quarter * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            quarter * s,
        ]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn axis_angle_from_matrix<T: Real>(m: &Mat3<T>) -> Vec3<T> {
    axis_angle_from_quat(quat_from_matrix(m))
}

/// Maps an axis-angle vector onto the short rotation (`|theta| <= pi`).
pub fn canonical_axis_angle<T: Real>(theta: Vec3<T>) -> Vec3<T> {
    if norm3(theta) <= T::PI() {
        theta
    } else {
        axis_angle_from_quat(quat_from_axis_angle(theta))
    }
}

/// Rigid transform from scene to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    /// Axis-angle rotation, radians.
    pub theta: Vec3<T>,
    /// Translation, scene units (cm for the camera task).
    pub t: Vec3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(theta: Vec3<T>, t: Vec3<T>) -> Self {
        Self {
            theta: canonical_axis_angle(theta),
            t,
        }
    }

    pub fn identity() -> Self {
        Self {
            theta: [T::zero(); 3],
            t: [T::zero(); 3],
        }
    }

    pub fn from_rotation_matrix(r: &Mat3<T>, t: Vec3<T>) -> Self {
        Self {
            theta: axis_angle_from_matrix(r),
            t,
        }
    }

    pub fn rotation(&self) -> Mat3<T> {
        rotation_matrix(self.theta)
    }

    pub fn quaternion(&self) -> [T; 4] {
        quat_from_axis_angle(self.theta)
    }

    pub fn transform(&self, y: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.rotation(), y), self.t)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        let q = quat_mul(self.quaternion(), other.quaternion());
        let t = add(mat_vec(&self.rotation(), other.t), self.t);
        Pose {
            theta: axis_angle_from_quat(q),
            t,
        }
    }

    pub fn canonicalize(&self) -> Pose<T> {
        Pose {
            theta: canonical_axis_angle(self.theta),
            t: self.t,
        }
    }

    /// `[theta, t]` as a flat 6-vector.
    pub fn to_params(&self) -> [T; 6] {
        [
            self.theta[0],
            self.theta[1],
            self.theta[2],
            self.t[0],
            self.t[1],
            self.t[2],
        ]
    }

    pub fn from_params(p: &[T]) -> Pose<T> {
        Pose {
            theta: [p[0], p[1], p[2]],
            t: [p[3], p[4], p[5]],
        }
    }

    /// Camera centre in scene coordinates, i.e. the translation of the inverse pose.
    pub fn camera_center(&self) -> Vec3<T> {
        invert_pose(self).t
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.t).all(|v| v.is_finite())
    }
}

pub fn invert_pose<T: Real>(h: &Pose<T>) -> Pose<T> {
    let rt = transpose(&h.rotation());
    let t = scale(mat_vec(&rt, h.t), -T::one());
    Pose {
        theta: scale(canonical_axis_angle(h.theta), -T::one()),
        t,
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        assert!(fx > T::zero() && fy > T::zero(), "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, x: Vec3<T>) -> Result<[T; 2]> {
        if !(x[2] > T::lit(MIN_DEPTH)) {
            return Err(Error::NonPositiveDepth { depth: x[2].as_f64() });
        }
        Ok([
            self.fx * x[0] / x[2] + self.cx,
            self.fy * x[1] / x[2] + self.cy,
        ])
    }

    /// Camera-frame point at `depth` along the ray through pixel `p`.
    pub fn unproject(&self, p: [T; 2], depth: T) -> Vec3<T> {
        [
            (p[0] - self.cx) / self.fx * depth,
            (p[1] - self.cy) / self.fy * depth,
            depth,
        ]
    }
}

/// A pixel paired with the scene coordinate predicted for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence<T> {
    pub p: [T; 2],
    pub y: Vec3<T>,
    pub grid_index: usize,
}

impl<T: Real> Correspondence<T> {
    pub fn new(p: [T; 2], y: Vec3<T>, grid_index: usize) -> Self {
        Self { p, y, grid_index }
    }
}

pub fn project<T: Real>(c: &Intrinsics<T>, h: &Pose<T>, y: Vec3<T>) -> Result<[T; 2]> {
    c.project_camera(h.transform(y))
}

/// `‖p − C h y‖`, saturated at `cap` (also for points behind the camera).
pub fn reprojection_error<T: Real>(
    c: &Intrinsics<T>,
    h: &Pose<T>,
    corr: &Correspondence<T>,
    cap: T,
) -> T {
    reprojection_error_with_rotation(c, &h.rotation(), h.t, corr, cap)
}

pub(crate) fn reprojection_error_with_rotation<T: Real>(
    c: &Intrinsics<T>,
    r: &Mat3<T>,
    t: Vec3<T>,
    corr: &Correspondence<T>,
    cap: T,
) -> T {
    let x = add(mat_vec(r, corr.y), t);
    match c.project_camera(x) {
        Ok(q) => {
            let du = q[0] - corr.p[0];
            let dv = q[1] - corr.p[1];
            let e = (du * du + dv * dv).sqrt();
            if e.is_finite() {
                e.min(cap)
            } else {
                cap
            }
        }
        Err(_) => cap,
    }
}

/// Gradient of the (uncapped) reprojection error with respect to the scene
/// coordinate. Zero where the error is saturated or exactly zero.
pub fn reprojection_error_point_grad<T: Real>(
    c: &Intrinsics<T>,
    r: &Mat3<T>,
    t: Vec3<T>,
    corr: &Correspondence<T>,
    cap: T,
) -> (T, Vec3<T>) {
    let x = add(mat_vec(r, corr.y), t);
    let zero = [T::zero(); 3];
    let Ok(q) = c.project_camera(x) else {
        return (cap, zero);
    };
    let du = q[0] - corr.p[0];
    let dv = q[1] - corr.p[1];
    let e = (du * du + dv * dv).sqrt();
    if !e.is_finite() || e >= cap {
        return (cap, zero);
    }
    if e == T::zero() {
        return (e, zero);
    }
    let iz = T::one() / x[2];
    let (gu, gv) = (du / e, dv / e);
    // d(e)/dx = [gu gv] * dpi/dx
    let dx = [
        gu * c.fx * iz,
        gv * c.fy * iz,
        -(gu * c.fx * x[0] + gv * c.fy * x[1]) * iz * iz,
    ];
    // d(e)/dy = d(e)/dx * R
    let g = [
        dx[0] * r[0][0] + dx[1] * r[1][0] + dx[2] * r[2][0],
        dx[0] * r[0][1] + dx[1] * r[1][1] + dx[2] * r[2][1],
        dx[0] * r[0][2] + dx[1] * r[1][2] + dx[2] * r[2][2],
    ];
    (e, g)
}

/// Reprojection errors in grid order, each in `[0, cap]`.
pub fn error_vector<T: Real>(
    c: &Intrinsics<T>,
    h: &Pose<T>,
    corrs: &[Correspondence<T>],
    cap: T,
) -> Result<Vec<T>> {
    if corrs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let r = h.rotation();
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by_key(|&i| corrs[i].grid_index);
    Ok(order
        .into_iter()
        .map(|i| reprojection_error_with_rotation(c, &r, h.t, &corrs[i], cap))
        .collect())
}

/// Angle of the relative rotation between two axis-angle vectors, in degrees.
pub fn rotation_angle<T: Real>(theta_a: Vec3<T>, theta_b: Vec3<T>) -> T {
    if theta_a == theta_b {
        return T::zero();
    }
    let qa = quat_from_axis_angle(theta_a);
    let qb = quat_from_axis_angle(theta_b);
    let rel = quat_mul(quat_conj(qa), qb);
    let s = (rel[1] * rel[1] + rel[2] * rel[2] + rel[3] * rel[3]).sqrt();
    let angle = T::lit(2.0) * s.atan2(rel[0].abs());
    angle.to_degrees()
}

/// Rotation error (degrees) and translation error (scene units) between the
/// camera poses obtained by inverting two scene poses.
pub fn pose_errors<T: Real>(h_est: &Pose<T>, h_gt: &Pose<T>) -> (T, T) {
    let cam_est = invert_pose(h_est);
    let cam_gt = invert_pose(h_gt);
    let angle = rotation_angle(cam_est.theta, cam_gt.theta);
    let dist = norm3(sub(cam_est.t, cam_gt.t));
    (angle, dist)
}

/// `max(angle error in degrees, translation error in cm)` on the inverted poses.
pub fn pose_loss<T: Real>(h_est: &Pose<T>, h_gt: &Pose<T>) -> T {
    let (a, d) = pose_errors(h_est, h_gt);
    a.max(d)
}
