//! Camera model and rigid-pose primitives.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel centers sit at integer coordinates; the principal point is the exact
//!   image center `((W - 1) / 2, (H - 1) / 2)`.
//! * Camera frames are x right, y down, z forward.
//! * A [`CameraPose`] maps points from its view's camera frame into the
//!   canonical frame (the frame of the first view): `X_canon = R X_view + T`.
//!   Rendering a view therefore uses the inverse transform.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Residual-norm threshold for Gram-Schmidt and quaternion normalization.
pub const DEGENERACY_EPS: f64 = 1e-8;
/// Guard on the homogeneous coordinate of a 4-vector translation.
pub const HOMOGENEOUS_EPS: f64 = 1e-8;
/// Translations shorter than this have no defined direction.
pub const TRANSLATION_NORM_EPS: f64 = 1e-8;
/// Smallest camera-frame depth accepted by [`project`].
pub const PROJECT_NEAR_EPS: f64 = 1e-6;

/// Focal length in pixels for a horizontal field of view.
pub fn fov_to_focal(fov_rad: f64, width_px: usize) -> Result<f64> {
    if !(fov_rad > 0.0 && fov_rad < std::f64::consts::PI) {
        return Err(Error::Domain(format!(
            "field of view {fov_rad} rad outside (0, pi)"
        )));
    }
    if width_px == 0 {
        return Err(Error::Domain("image width must be at least 1".into()));
    }
    Ok(focal_unchecked(fov_rad, width_px))
}

#[inline]
fn focal_unchecked(fov_rad: f64, width_px: usize) -> f64 {
    (width_px as f64 / 2.0) / (fov_rad / 2.0).tan()
}

/// d(focal)/d(fov) for [`fov_to_focal`].
#[inline]
pub fn focal_fov_derivative(fov_rad: f64, width_px: usize) -> f64 {
    let s = (fov_rad / 2.0).sin();
    -(width_px as f64) / (4.0 * s * s)
}

/// Pinhole intrinsics with a single field of view shared by both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fov_rad: f64,
    width: usize,
    height: usize,
}

impl CameraIntrinsics {
    pub fn new(fov_rad: f64, width: usize, height: usize) -> Result<Self> {
        fov_to_focal(fov_rad, width)?;
        if height == 0 {
            return Err(Error::Domain("image height must be at least 1".into()));
        }
        Ok(Self {
            fov_rad,
            width,
            height,
        })
    }

    /// Builds intrinsics from a field of view in degrees.
    ///
    /// Serialized intrinsics carry degrees, so scenes that must round-trip
    /// bit-exactly through disk should be constructed here.
    pub fn from_degrees(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fov_deg.to_radians(), width, height)
    }

    pub fn fov_rad(&self) -> f64 {
        self.fov_rad
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn focal(&self) -> f64 {
        focal_unchecked(self.fov_rad, self.width)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Same image size with a different field of view.
    pub fn with_fov(&self, fov_rad: f64) -> Result<Self> {
        Self::new(fov_rad, self.width, self.height)
    }

    /// Camera-frame ray `[(u - cx) / f, (v - cy) / f, 1]` through a pixel.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Vec3::new((u - cx) / f, (v - cy) / f, 1.0)
    }
}

/// Rigid transform from a view's camera frame into the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates orthonormality and orientation to 1e-6.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho < 1e-6 && (det - 1.0).abs() < 1e-6) || !translation.iter().all(|t| t.is_finite())
        {
            return Err(Error::Argument(format!(
                "not a rigid transform (orthogonality residual {ortho:e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// View-frame point to canonical frame.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Canonical-frame point to this view's camera frame.
    pub fn to_view(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in the canonical frame.
    pub fn center(&self) -> Vec3 {
        self.translation
    }
}

/// Raw pose parameterization: 6D rotation plus homogeneous translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams6D {
    pub rot6: [f64; 6],
    pub trans_h: [f64; 4],
}

impl Default for PoseParams6D {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseParams6D {
    pub const LEN: usize = 10;

    pub fn identity() -> Self {
        Self {
            rot6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            trans_h: [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Encodes a pose: the first two rotation columns and `(T, 1)`.
    pub fn from_pose(pose: &CameraPose) -> Self {
        let r = &pose.rotation;
        let t = &pose.translation;
        Self {
            rot6: [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]],
            trans_h: [t.x, t.y, t.z, 1.0],
        }
    }

    pub fn to_array(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..6].copy_from_slice(&self.rot6);
        out[6..].copy_from_slice(&self.trans_h);
        out
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut rot6 = [0.0; 6];
        let mut trans_h = [0.0; 4];
        rot6.copy_from_slice(&values[..6]);
        trans_h.copy_from_slice(&values[6..10]);
        Self { rot6, trans_h }
    }

    pub fn decode(&self) -> Result<CameraPose> {
        Ok(CameraPose {
            rotation: rot6d_to_matrix(&self.rot6)?,
            translation: homogeneous_to_translation(&self.trans_h)?,
        })
    }

    /// Pulls gradients on the decoded rotation and translation back onto
    /// the ten raw parameters.
    pub fn backward(&self, d_rotation: &Mat3, d_translation: &Vec3) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..6].copy_from_slice(&rot6d_backward(&self.rot6, d_rotation));
        out[6..].copy_from_slice(&homogeneous_backward(&self.trans_h, d_translation));
        out
    }
}

pub fn homogeneous_to_translation(h: &[f64; 4]) -> Result<Vec3> {
    if !(h[3].abs() > HOMOGENEOUS_EPS) {
        return Err(Error::Degenerate(format!(
            "homogeneous translation weight {} below {HOMOGENEOUS_EPS:e}",
            h[3]
        )));
    }
    Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn homogeneous_backward(h: &[f64; 4], d_t: &Vec3) -> [f64; 4] {
    let w = h[3];
    let dot = d_t.x * h[0] + d_t.y * h[1] + d_t.z * h[2];
    [d_t.x / w, d_t.y / w, d_t.z / w, -dot / (w * w)]
}

struct GramSchmidt {
    b1: Vec3,
    b2: Vec3,
    n1: f64,
    n2: f64,
    a2: Vec3,
}

fn gram_schmidt(rot6: &[f64; 6]) -> Result<GramSchmidt> {
    let a1 = Vec3::new(rot6[0], rot6[1], rot6[2]);
    let a2 = Vec3::new(rot6[3], rot6[4], rot6[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERACY_EPS) {
        return Err(Error::Degenerate(format!(
            "first 6D rotation column has norm {n1:e}"
        )));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERACY_EPS) {
        return Err(Error::Degenerate(format!(
            "second 6D rotation column is parallel to the first (residual {n2:e})"
        )));
    }
    Ok(GramSchmidt {
        b1,
        b2: u2 / n2,
        n1,
        n2,
        a2,
    })
}

/// Maps two 3-vectors to a rotation whose columns are the Gram-Schmidt basis.
pub fn rot6d_to_matrix(rot6: &[f64; 6]) -> Result<Mat3> {
    let gs = gram_schmidt(rot6)?;
    let b3 = gs.b1.cross(&gs.b2);
    Ok(Mat3::from_columns(&[gs.b1, gs.b2, b3]))
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]. Inputs must be non-degenerate.
pub fn rot6d_backward(rot6: &[f64; 6], d_rotation: &Mat3) -> [f64; 6] {
    let Ok(gs) = gram_schmidt(rot6) else {
        return [0.0; 6];
    };
    let g1 = d_rotation.column(0).into_owned();
    let g2 = d_rotation.column(1).into_owned();
    let g3 = d_rotation.column(2).into_owned();
    let (b1, b2) = (gs.b1, gs.b2);

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    // b2 = u2 / |u2|
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / gs.n2;
    // u2 = a2 - (b1 . a2) b1
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(&gs.a2) + gs.a2 * b1.dot(&gu2);
    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / gs.n1;

    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}

fn unit_quat(q: &[f64; 4]) -> Result<([f64; 4], f64)> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > DEGENERACY_EPS) {
        return Err(Error::Degenerate(format!("quaternion norm {n:e}")));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

/// Rotation matrix of a `(w, x, y, z)` quaternion, normalized internally.
pub fn quat_to_matrix(q: &[f64; 4]) -> Result<Mat3> {
    let ([w, x, y, z], _) = unit_quat(q)?;
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Vector-Jacobian product of [`quat_to_matrix`] with respect to the raw
/// (unnormalized) quaternion.
pub fn quat_backward(q: &[f64; 4], d_rotation: &Mat3) -> [f64; 4] {
    let Ok(([w, x, y, z], n)) = unit_quat(q) else {
        return [0.0; 4];
    };
    let g = |r: usize, c: usize| d_rotation[(r, c)];
    let gw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let unit = [w, x, y, z];
    let grad = [gw, gx, gy, gz];
    let dot: f64 = unit.iter().zip(&grad).map(|(a, b)| a * b).sum();
    [
        (gw - w * dot) / n,
        (gx - x * dot) / n,
        (gy - y * dot) / n,
        (gz - z * dot) / n,
    ]
}

/// Re-expresses every pose relative to the first one.
pub fn normalize_poses(poses: &[CameraPose]) -> Result<Vec<CameraPose>> {
    let first = poses
        .first()
        .ok_or_else(|| Error::Argument("cannot normalize an empty pose list".into()))?;
    let inv = first.inverse();
    Ok(poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                CameraPose::identity()
            } else {
                inv.compose(p)
            }
        })
        .collect())
}

/// Lifts a pixel at camera-frame depth `depth` into the canonical frame.
pub fn unproject(
    pixel: (f64, f64),
    depth: f64,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth {depth} is not positive")));
    }
    let x_cam = intrinsics.ray(pixel.0, pixel.1) * depth;
    Ok(pose.transform_point(&x_cam))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { pixel: (f64, f64), depth: f64 },
    /// Camera-frame depth at or below the near epsilon; callers cull.
    BehindCamera { depth: f64 },
}

impl Projection {
    pub fn visible(self) -> Option<((f64, f64), f64)> {
        match self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            Projection::BehindCamera { .. } => None,
        }
    }
}

pub fn project(point: &Vec3, intrinsics: &CameraIntrinsics, pose: &CameraPose) -> Projection {
    let x = pose.to_view(point);
    if !(x.z > PROJECT_NEAR_EPS) {
        return Projection::BehindCamera { depth: x.z };
    }
    let f = intrinsics.focal();
    let (cx, cy) = intrinsics.principal_point();
    Projection::Visible {
        pixel: (f * x.x / x.z + cx, f * x.y / x.z + cy),
        depth: x.z,
    }
}

/// Rotation angle of `R` in radians, accurate near 0 and near pi.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = 0.5
        * Vec3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    s.atan2(c)
}

/// Geodesic distance between two rotations in radians.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Unsigned angle between two vectors in radians.
pub fn vector_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Rotation and translation-direction errors, both in degrees.
///
/// Translations shorter than [`TRANSLATION_NORM_EPS`] have no direction:
/// both short gives 0 degrees, exactly one short gives 90 degrees.
pub fn pose_angular_errors(pred: &CameraPose, gt: &CameraPose) -> (f64, f64) {
    let rot = geodesic_distance(&pred.rotation, &gt.rotation).to_degrees();
    let pred_short = pred.translation.norm() < TRANSLATION_NORM_EPS;
    let gt_short = gt.translation.norm() < TRANSLATION_NORM_EPS;
    let trans = match (pred_short, gt_short) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 90.0,
        (false, false) => vector_angle(&pred.translation, &gt.translation).to_degrees(),
    };
    (rot, trans)
}

/// Rotation by `angle` radians about a (not necessarily unit) axis.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let unit = nalgebra::Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix()
}

/// On-disk pose record: row-major rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<&PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(rec: &PoseRecord) -> Result<Self> {
        CameraPose::new(
            Mat3::from_row_slice(&rec.rotation),
            Vec3::from_column_slice(&rec.translation),
        )
    }
}

/// On-disk intrinsics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsRecord {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraIntrinsics> for IntrinsicsRecord {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fov_deg: k.fov_rad.to_degrees(),
            width: k.width,
            height: k.height,
        }
    }
}

impl TryFrom<&IntrinsicsRecord> for CameraIntrinsics {
    type Error = Error;

    fn try_from(rec: &IntrinsicsRecord) -> Result<Self> {
        CameraIntrinsics::from_degrees(rec.fov_deg, rec.width, rec.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        CameraPose::new(axis_angle(&axis, rng.random_range(0.0..PI)), t).unwrap()
    }

    /// Independent oracle: quaternion from matrix, angle from the quaternion.
    fn quaternion_angle(r: &Mat3) -> f64 {
        let q = nalgebra::UnitQuaternion::from_matrix(r);
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    #[test]
    fn focal_examples() {
        assert!((fov_to_focal(PI / 2.0, 224).unwrap() - 112.0).abs() < 1e-12);
        assert!((fov_to_focal(2.0 * 0.5f64.atan(), 224).unwrap() - 224.0).abs() < 1e-12);
        assert!(matches!(fov_to_focal(0.0, 224), Err(Error::Domain(_))));
        assert!(matches!(fov_to_focal(PI, 224), Err(Error::Domain(_))));
    }

    #[test]
    fn focal_derivative_matches_central_difference() {
        for fov in [0.3, 1.0, 2.0] {
            let h = 1e-6;
            let fd = (focal_unchecked(fov + h, 64) - focal_unchecked(fov - h, 64)) / (2.0 * h);
            let an = focal_fov_derivative(fov, 64);
            assert!((fd - an).abs() < 1e-6 * an.abs(), "{fd} vs {an}");
        }
    }

    #[test]
    fn rot6d_examples() {
        let id = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(id, Mat3::identity());
        let scaled = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(scaled, Mat3::identity());
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 1e-12, 0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rot6d_orthonormal_over_many_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 10_000 {
            let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let Ok(r) = rot6d_to_matrix(&v) else { continue };
            let resid = (r.transpose() * r - Mat3::identity()).abs().max();
            assert!(resid < 1e-6);
            assert!((r.determinant() - 1.0).abs() < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn rot6d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let loss = |x: &[f64; 6]| rot6d_to_matrix(x).unwrap().component_mul(&g).sum();
            let an = rot6d_backward(&v, &g);
            for k in 0..6 {
                let h = 1e-6;
                let (mut p, mut m) = (v, v);
                p[k] += h;
                m[k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - an[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", an[k]);
            }
        }
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(quat_to_matrix(&[1.0, 0.0, 0.0, 0.0]).unwrap(), Mat3::identity());
        assert_eq!(
            quat_to_matrix(&[0.0, 0.0, 0.0, 1.0]).unwrap(),
            Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))
        );
        assert_eq!(quat_to_matrix(&[2.0, 0.0, 0.0, 0.0]).unwrap(), Mat3::identity());
        assert!(matches!(
            quat_to_matrix(&[0.0, 1e-10, 0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let loss = |x: &[f64; 4]| quat_to_matrix(x).unwrap().component_mul(&g).sum();
            let an = quat_backward(&q, &g);
            for k in 0..4 {
                let h = 1e-6;
                let (mut p, mut m) = (q, q);
                p[k] += h;
                m[k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - an[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn homogeneous_translation_guard() {
        let p = PoseParams6D {
            rot6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            trans_h: [1.0, 2.0, 3.0, 1e-9],
        };
        assert!(matches!(p.decode(), Err(Error::Degenerate(_))));
        let p = PoseParams6D {
            trans_h: [2.0, 4.0, 6.0, 2.0],
            ..p
        };
        assert_eq!(p.decode().unwrap().translation, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn pose_params_encode_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let back = PoseParams6D::from_pose(&pose).decode().unwrap();
            assert!((back.rotation - pose.rotation).abs().max() < 1e-12);
            assert_eq!(back.translation, pose.translation);
        }
    }

    #[test]
    fn normalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_pose(&mut rng);
        for out in normalize_poses(&[q, q, q]).unwrap() {
            assert!((out.rotation - Mat3::identity()).abs().max() < 1e-12);
            assert!(out.translation.norm() < 1e-12);
        }
        let out = normalize_poses(&[CameraPose::identity(), q]).unwrap();
        assert_eq!(out[1], q);

        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let out = normalize_poses(&[a, b]).unwrap();
        let recomposed = a.compose(&out[1]);
        assert!((recomposed.rotation - b.rotation).abs().max() < 1e-12);
        assert!((recomposed.translation - b.translation).norm() < 1e-12);
        assert!(matches!(normalize_poses(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn normalize_preserves_relative_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<_> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let out = normalize_poses(&poses).unwrap();
        for i in 0..poses.len() {
            for j in 0..poses.len() {
                let a = poses[i].inverse().compose(&poses[j]);
                let b = out[i].inverse().compose(&out[j]);
                assert!((a.rotation - b.rotation).abs().max() < 1e-9);
                assert!((a.translation - b.translation).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn unproject_examples() {
        let k = CameraIntrinsics::new(PI / 2.0, 224, 224).unwrap();
        let (cx, cy) = k.principal_point();
        let id = CameraPose::identity();
        assert_eq!(unproject((cx, cy), 5.0, &k, &id).unwrap(), Vec3::new(0.0, 0.0, 5.0));
        let p = unproject((cx + k.focal(), cy), 5.0, &k, &id).unwrap();
        assert!((p - Vec3::new(5.0, 0.0, 5.0)).norm() < 1e-12);
        assert!(matches!(unproject((cx, cy), 0.0, &k, &id), Err(Error::Domain(_))));
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(PI / 2.0, 224, 224).unwrap();
        let (cx, cy) = k.principal_point();
        let id = CameraPose::identity();
        assert_eq!(
            project(&Vec3::new(0.0, 0.0, 5.0), &k, &id),
            Projection::Visible { pixel: (cx, cy), depth: 5.0 }
        );
        let ((u, v), d) = project(&Vec3::new(5.0, 0.0, 5.0), &k, &id).visible().unwrap();
        assert!((u - (cx + 112.0)).abs() < 1e-12 && (v - cy).abs() < 1e-12 && d == 5.0);
        assert!(matches!(
            project(&Vec3::new(1.0, 0.0, 0.0), &k, &id),
            Projection::BehindCamera { .. }
        ));
    }

    #[test]
    fn pose_error_examples() {
        let id = CameraPose::identity();
        assert_eq!(pose_angular_errors(&id, &id), (0.0, 0.0));
        let a = CameraPose::new(
            Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let b = CameraPose::new(Mat3::identity(), Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let (r, t) = pose_angular_errors(&a, &b);
        assert!((r - 180.0).abs() < 1e-12 && (t - 90.0).abs() < 1e-12);

        let short = CameraPose::new(Mat3::identity(), Vec3::new(1e-9, 0.0, 0.0)).unwrap();
        assert_eq!(pose_angular_errors(&short, &b).1, 90.0);
        assert_eq!(pose_angular_errors(&short, &id).1, 0.0);
    }

    #[test]
    fn pose_error_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let (r, _) = pose_angular_errors(&a, &b);
            let oracle = quaternion_angle(&(a.rotation.transpose() * b.rotation)).to_degrees();
            assert!((r - oracle).abs() < 1e-6, "{r} vs {oracle}");
        }
    }

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let json = serde_json::to_string(&PoseRecord::from(&pose)).unwrap();
        let rec: PoseRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(CameraPose::try_from(&rec).unwrap(), pose);
        let k = CameraIntrinsics::from_degrees(53.5, 32, 24).unwrap();
        let rec: IntrinsicsRecord =
            serde_json::from_str(&serde_json::to_string(&IntrinsicsRecord::from(&k)).unwrap())
                .unwrap();
        assert_eq!(rec.width, 32);
        assert!(serde_json::from_str::<IntrinsicsRecord>(
            r#"{"fov_deg": 50, "width": 3, "height": 3, "extra": 1}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn quat_sign_and_scale_invariance(
            q in prop::array::uniform4(-2.0f64..2.0),
            lambda in 0.01f64..100.0,
        ) {
            let n: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(n > 1e-3);
            let r = quat_to_matrix(&q).unwrap();
            let neg = quat_to_matrix(&q.map(|x| -x)).unwrap();
            prop_assert_eq!(r, neg);
            let scaled = quat_to_matrix(&q.map(|x| x * lambda)).unwrap();
            prop_assert!((r - scaled).abs().max() < 1e-12);
        }

        #[test]
        fn project_unproject_round_trip(
            u in 0.0f64..63.0, v in 0.0f64..47.0, depth in 0.1f64..50.0,
            axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..3.0,
            t in prop::array::uniform3(-3.0f64..3.0), fov in 0.3f64..2.5,
        ) {
            prop_assume!(Vec3::from(axis).norm() > 1e-3);
            let k = CameraIntrinsics::new(fov, 64, 48).unwrap();
            let pose = CameraPose::new(axis_angle(&Vec3::from(axis), angle), Vec3::from(t)).unwrap();
            let p = unproject((u, v), depth, &k, &pose).unwrap();
            let ((u2, v2), d2) = project(&p, &k, &pose).visible().unwrap();
            prop_assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6 && (depth - d2).abs() < 1e-6);
            let p2 = unproject((u2, v2), d2, &k, &pose).unwrap();
            prop_assert!((p - p2).norm() < 1e-6);
        }

        #[test]
        fn same_pose_has_zero_error(
            axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..3.1,
            t in prop::array::uniform3(-3.0f64..3.0),
        ) {
            prop_assume!(Vec3::from(axis).norm() > 1e-3 && Vec3::from(t).norm() > 1e-6);
            let pose = CameraPose::new(axis_angle(&Vec3::from(axis), angle), Vec3::from(t)).unwrap();
            prop_assert_eq!(pose_angular_errors(&pose, &pose), (0.0, 0.0));
        }
    }
}
