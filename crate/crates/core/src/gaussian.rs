//! Gaussian primitives, bounded depth activation, and spherical-harmonics color.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_backward, quat_to_matrix, unproject, CameraIntrinsics, CameraPose, Mat3, Vec3};

pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 100.0;
pub const MAX_SH_DEGREE: usize = 2;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients per channel for a degree.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn check_planes(near: f64, far: f64) -> Result<()> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::Argument(format!(
            "depth planes must satisfy 0 < near < far, got near={near}, far={far}"
        )));
    }
    Ok(())
}

/// `near + sigmoid(raw) * (far - near)`.
pub fn activate_depth(raw: f64, near: f64, far: f64) -> Result<f64> {
    check_planes(near, far)?;
    Ok(near + sigmoid(raw) * (far - near))
}

/// d(depth)/d(raw) of [`activate_depth`].
pub fn activate_depth_derivative(raw: f64, near: f64, far: f64) -> f64 {
    let s = sigmoid(raw);
    s * (1.0 - s) * (far - near)
}

/// Raw logit producing `depth`; `depth` must lie strictly inside the planes.
pub fn depth_to_raw(depth: f64, near: f64, far: f64) -> Result<f64> {
    check_planes(near, far)?;
    if !(depth > near && depth < far) {
        return Err(Error::Domain(format!(
            "depth {depth} outside the open interval ({near}, {far})"
        )));
    }
    Ok(logit((depth - near) / (far - near)))
}

/// Per-view H x W depth logits with their activation planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    raw: Vec<f64>,
    near: f64,
    far: f64,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, raw: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        check_planes(near, far)?;
        if raw.len() != width * height {
            return Err(Error::Argument(format!(
                "{} logits cannot form a {width}x{height} depth map",
                raw.len()
            )));
        }
        Ok(Self {
            width,
            height,
            raw,
            near,
            far,
        })
    }

    /// All logits zero: every pixel at the middle of the depth range.
    pub fn flat(width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], near, far)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.near + sigmoid(self.raw[y * self.width + x]) * (self.far - self.near)
    }

    pub fn activated(&self) -> Vec<f64> {
        self.raw
            .iter()
            .map(|&r| self.near + sigmoid(r) * (self.far - self.near))
            .collect()
    }
}

/// Lifts every pixel of a depth map into the canonical frame.
pub fn lift_depth_to_centers(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Vec<Vec3>> {
    if depth.width != intrinsics.width() || depth.height != intrinsics.height() {
        return Err(Error::Argument(format!(
            "depth map is {}x{} but the camera is {}x{}",
            depth.width,
            depth.height,
            intrinsics.width(),
            intrinsics.height()
        )));
    }
    let mut out = Vec::with_capacity(depth.width * depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            out.push(unproject(
                (x as f64, y as f64),
                depth.depth_at(x, y),
                intrinsics,
                pose,
            )?);
        }
    }
    Ok(out)
}

/// `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn build_covariance(quat: &[f64; 4], log_scale: &[f64; 3]) -> Result<Mat3> {
    let r = quat_to_matrix(quat)?;
    let m = r * Mat3::from_diagonal(&Vec3::new(
        log_scale[0].exp(),
        log_scale[1].exp(),
        log_scale[2].exp(),
    ));
    Ok(m * m.transpose())
}

/// Gradients of a scalar through [`build_covariance`].
pub fn build_covariance_backward(
    quat: &[f64; 4],
    log_scale: &[f64; 3],
    d_cov: &Mat3,
) -> ([f64; 4], [f64; 3]) {
    let Ok(r) = quat_to_matrix(quat) else {
        return ([0.0; 4], [0.0; 3]);
    };
    let s = Vec3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Mat3::from_diagonal(&s);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_r = Mat3::zeros();
    let mut d_log = [0.0; 3];
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * s[j];
            d_log[j] += d_m[(i, j)] * r[(i, j)];
        }
        d_log[j] *= s[j];
    }
    (quat_backward(quat, &d_r), d_log)
}

/// Real SH basis up to degree 2 at a unit direction, in coefficient order.
pub fn sh_basis(degree: usize, dir: &Vec3) -> [f64; 9] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 9];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (x * x - y * y);
    }
    b
}

/// d(basis_k)/d(dir) for each coefficient k.
fn sh_basis_gradient(degree: usize, dir: &Vec3) -> [Vec3; 9] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = [Vec3::zeros(); 9];
    if degree >= 1 {
        g[1] = Vec3::new(0.0, -SH_C1, 0.0);
        g[2] = Vec3::new(0.0, 0.0, SH_C1);
        g[3] = Vec3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        g[4] = SH_C2[0] * Vec3::new(y, x, 0.0);
        g[5] = SH_C2[1] * Vec3::new(0.0, z, y);
        g[6] = SH_C2[2] * Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = SH_C2[3] * Vec3::new(z, 0.0, x);
        g[8] = SH_C2[4] * Vec3::new(2.0 * x, -2.0 * y, 0.0);
    }
    g
}

fn check_sh(coeffs: &[f64], degree: usize) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::Argument(format!(
            "SH degree {degree} above the supported maximum {MAX_SH_DEGREE}"
        )));
    }
    let k = sh_coeff_count(degree);
    if coeffs.len() != k * 3 {
        return Err(Error::Argument(format!(
            "degree {degree} needs {} SH values, got {}",
            k * 3,
            coeffs.len()
        )));
    }
    Ok(())
}

/// Unclamped `0.5 + sum_k c_k Y_k(dir)` per channel. `coeffs` is k x 3, row-major.
fn sh_raw(coeffs: &[f64], degree: usize, dir: &Vec3) -> [f64; 3] {
    let basis = sh_basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (k, row) in coeffs.chunks_exact(3).enumerate() {
        for c in 0..3 {
            rgb[c] += basis[k] * row[c];
        }
    }
    rgb
}

/// View-dependent color clamped to [0, 1].
pub fn eval_sh(coeffs: &[f64], view_dir: &Vec3, degree: usize) -> Result<[f64; 3]> {
    check_sh(coeffs, degree)?;
    if (view_dir.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Argument(format!(
            "view direction norm {} is not 1",
            view_dir.norm()
        )));
    }
    Ok(sh_raw(coeffs, degree, view_dir).map(|v| v.clamp(0.0, 1.0)))
}

/// Color plus the per-channel mask of unclamped channels.
#[cfg(test)]
pub(crate) fn eval_sh_with_mask(coeffs: &[f64], degree: usize, dir: &Vec3) -> ([f64; 3], [bool; 3]) {
    clamp_with_mask(sh_raw(coeffs, degree, dir))
}

pub(crate) fn sh_raw_color(coeffs: &[f64], degree: usize, dir: &Vec3) -> [f64; 3] {
    sh_raw(coeffs, degree, dir)
}

pub(crate) fn clamp_with_mask(raw: [f64; 3]) -> ([f64; 3], [bool; 3]) {
    (
        raw.map(|v| v.clamp(0.0, 1.0)),
        raw.map(|v| (0.0..=1.0).contains(&v)),
    )
}

/// Backpropagates a color gradient into SH coefficients and the view direction.
pub(crate) fn eval_sh_backward(
    coeffs: &[f64],
    degree: usize,
    dir: &Vec3,
    active: [bool; 3],
    d_rgb: [f64; 3],
    d_coeffs: &mut [f64],
) -> Vec3 {
    let d = [0, 1, 2].map(|c| if active[c] { d_rgb[c] } else { 0.0 });
    let basis = sh_basis(degree, dir);
    let k = sh_coeff_count(degree);
    for i in 0..k {
        for c in 0..3 {
            d_coeffs[i * 3 + c] += basis[i] * d[c];
        }
    }
    if degree == 0 {
        return Vec3::zeros();
    }
    let grads = sh_basis_gradient(degree, dir);
    let mut d_dir = Vec3::zeros();
    for i in 1..k {
        let w: f64 = (0..3).map(|c| coeffs[i * 3 + c] * d[c]).sum();
        d_dir += grads[i] * w;
    }
    d_dir
}

/// Struct-of-arrays Gaussian primitives in the canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub centers: Vec<Vec3>,
    pub quats: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// `len() * k * 3` values; primitive-major, then coefficient, then channel.
    pub sh: Vec<f64>,
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            centers: Vec::new(),
            quats: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        sh_coeff_count(self.sh_degree) * 3
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn push(
        &mut self,
        center: Vec3,
        quat: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        sh: &[f64],
    ) {
        assert_eq!(sh.len(), self.sh_stride(), "SH coefficient count");
        self.centers.push(center);
        self.quats.push(quat);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn covariance(&self, i: usize) -> Result<Mat3> {
        build_covariance(&self.quats[i], &self.log_scales[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Argument(format!("SH degree {} unsupported", self.sh_degree)));
        }
        if self.quats.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n * self.sh_stride()
        {
            return Err(Error::Argument("Gaussian attribute arrays disagree in length".into()));
        }
        Ok(())
    }

    /// Rounds every attribute through `f32`, the on-disk precision.
    pub fn quantized_f32(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        Self {
            sh_degree: self.sh_degree,
            centers: self.centers.iter().map(|c| c.map(q)).collect(),
            quats: self.quats.iter().map(|a| a.map(q)).collect(),
            log_scales: self.log_scales.iter().map(|a| a.map(q)).collect(),
            opacity_logits: self.opacity_logits.iter().map(|&v| q(v)).collect(),
            sh: self.sh.iter().map(|&v| q(v)).collect(),
        }
    }

    /// Expresses the set in another frame: `x' = pose.rotation * x + pose.translation`.
    pub fn transformed(&self, pose: &CameraPose) -> Self {
        let qr = nalgebra::UnitQuaternion::from_matrix(&pose.rotation);
        let quats = self
            .quats
            .iter()
            .map(|q| {
                let local = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
                let out = qr.quaternion() * local;
                [out.w, out.i, out.j, out.k]
            })
            .collect();
        Self {
            centers: self.centers.iter().map(|c| pose.transform_point(c)).collect(),
            quats,
            ..self.clone()
        }
    }
}

/// Sidecar for the binary Gaussian record stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSidecar {
    pub count: usize,
    pub sh_degree: usize,
    pub near: f64,
    pub far: f64,
}

/// Magic bytes opening a Gaussian record stream.
pub const GAUSSIAN_MAGIC: &[u8; 4] = b"GSPL";
pub const GAUSSIAN_FORMAT_VERSION: u32 = 1;

/// Binary layout, all little-endian:
///
/// ```text
/// offset 0   4 bytes  magic "GSPL"
/// offset 4   u32      format version (1)
/// offset 8   u32      primitive count N
/// offset 12  u32      SH degree L
/// offset 16  N records of (11 + 3 (L+1)^2) f32 values:
///            center xyz, quat wxyz, log_scale xyz, opacity_logit,
///            SH coefficients (coefficient-major, RGB interleaved)
/// ```
pub fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.len() * (11 + set.sh_stride()) * 4);
    out.extend_from_slice(GAUSSIAN_MAGIC);
    out.extend_from_slice(&GAUSSIAN_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.sh_degree as u32).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..set.len() {
        set.centers[i].iter().for_each(|&v| put(v));
        set.quats[i].iter().for_each(|&v| put(v));
        set.log_scales[i].iter().for_each(|&v| put(v));
        put(set.opacity_logits[i]);
        set.sh_of(i).iter().for_each(|&v| put(v));
    }
    out
}

pub fn decode_gaussians(bytes: &[u8], path: &Path) -> Result<GaussianSet> {
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::parse(path, bytes.len() as u64, "truncated header"))
    };
    if bytes.get(..4) != Some(GAUSSIAN_MAGIC.as_slice()) {
        return Err(Error::parse(path, 0, "missing GSPL magic"));
    }
    let version = u32_at(4)?;
    if version != GAUSSIAN_FORMAT_VERSION {
        return Err(Error::parse(path, 4, format!("unsupported version {version}")));
    }
    let count = u32_at(8)? as usize;
    let degree = u32_at(12)? as usize;
    if degree > MAX_SH_DEGREE {
        return Err(Error::parse(path, 12, format!("SH degree {degree} unsupported")));
    }
    let mut set = GaussianSet::empty(degree);
    let stride = 11 + set.sh_stride();
    let need = 16 + count * stride * 4;
    if bytes.len() < need {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("expected {need} bytes for {count} primitives"),
        ));
    }
    let vals: Vec<f64> = bytes[16..need]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    for rec in vals.chunks_exact(stride) {
        set.push(
            Vec3::new(rec[0], rec[1], rec[2]),
            [rec[3], rec[4], rec[5], rec[6]],
            [rec[7], rec[8], rec[9]],
            rec[10],
            &rec[11..],
        );
    }
    Ok(set)
}

pub fn save_gaussians(set: &GaussianSet, near: f64, far: f64, path: &Path) -> Result<()> {
    fs::write(path, encode_gaussians(set)).map_err(|e| Error::io(path, e))?;
    let side = GaussianSidecar {
        count: set.len(),
        sh_degree: set.sh_degree,
        near,
        far,
    };
    let side_path = path.with_extension("json");
    fs::write(
        &side_path,
        serde_json::to_string_pretty(&side).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(&side_path, e))
}

pub fn load_gaussians(path: &Path) -> Result<(GaussianSet, GaussianSidecar)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let set = decode_gaussians(&bytes, path)?;
    let side_path = path.with_extension("json");
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: GaussianSidecar = crate::json::from_str(&text, &side_path)?;
    if side.count != set.len() || side.sh_degree != set.sh_degree {
        return Err(Error::parse(
            &side_path,
            0,
            "sidecar count/degree disagree with the record stream",
        ));
    }
    Ok((set, side))
}
