//! Optimizable scene state: per-view raw poses, one shared field of view,
//! and Gaussians anchored to pixels of context views through depth logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{activate_depth, depth_to_raw, sh_coeff_count, GaussianSet, MAX_SH_DEGREE};
use crate::geometry::{project, CameraIntrinsics, CameraPose, PoseParams6D, Projection, Vec3};

/// Raw parameter groups with their own learning rate, clip and freeze flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Sh,
    Opacity,
    Scale,
    Quat,
    Depth,
    ContextPose,
    TargetPose,
    Fov,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::Sh,
        ParamClass::Opacity,
        ParamClass::Scale,
        ParamClass::Quat,
        ParamClass::Depth,
        ParamClass::ContextPose,
        ParamClass::TargetPose,
        ParamClass::Fov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Sh => "sh",
            ParamClass::Opacity => "opacity",
            ParamClass::Scale => "scale",
            ParamClass::Quat => "quat",
            ParamClass::Depth => "depth",
            ParamClass::ContextPose => "context_pose",
            ParamClass::TargetPose => "target_pose",
            ParamClass::Fov => "fov",
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, ParamClass::ContextPose | ParamClass::TargetPose)
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ParamClass::ALL.iter().map(|c| c.name()).collect();
                Error::Argument(format!("unknown parameter class `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Parses a comma-separated class list; `pose` expands to both pose classes.
pub fn parse_class_list(s: &str) -> Result<Vec<ParamClass>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "pose" {
            out.extend([ParamClass::ContextPose, ParamClass::TargetPose]);
        } else if part == "gaussian" {
            out.extend([ParamClass::Sh, ParamClass::Opacity, ParamClass::Scale, ParamClass::Quat]);
        } else {
            out.push(part.parse()?);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Where a primitive lives: a context view and a (sub)pixel on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub view: usize,
    pub pixel: [f64; 2],
}

/// Everything photometric bundle adjustment optimizes.
///
/// Views `0..num_context` are context views and the rest are targets.
/// View 0 defines the canonical frame and its pose stays the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParameters {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub sh_degree: usize,
    pub num_context: usize,
    pub poses: Vec<PoseParams6D>,
    pub fov_rad: f64,
    pub anchors: Vec<Anchor>,
    pub depth_raw: Vec<f64>,
    pub quats: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl SceneParameters {
    /// Identity poses and no primitives.
    pub fn empty(
        width: usize,
        height: usize,
        num_context: usize,
        num_target: usize,
        fov_rad: f64,
        near: f64,
        far: f64,
        sh_degree: usize,
    ) -> Result<Self> {
        if num_context == 0 {
            return Err(Error::Argument("at least one context view is required".into()));
        }
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Argument(format!("SH degree {sh_degree} above {MAX_SH_DEGREE}")));
        }
        CameraIntrinsics::new(fov_rad, width, height)?;
        activate_depth(0.0, near, far)?;
        Ok(Self {
            width,
            height,
            near,
            far,
            sh_degree,
            num_context,
            poses: vec![PoseParams6D::identity(); num_context + num_target],
            fov_rad,
            anchors: Vec::new(),
            depth_raw: Vec::new(),
            quats: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        })
    }

    /// Anchors an existing canonical-frame Gaussian set to view 0 (which
    /// must see every primitive between the planes) and sets the poses.
    pub fn from_gaussians(
        set: &GaussianSet,
        intrinsics: &CameraIntrinsics,
        poses: &[CameraPose],
        num_context: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if poses.is_empty() || num_context > poses.len() {
            return Err(Error::Argument(format!(
                "{num_context} context views requested from {} poses",
                poses.len()
            )));
        }
        let mut p = Self::empty(
            intrinsics.width(),
            intrinsics.height(),
            num_context,
            poses.len() - num_context,
            intrinsics.fov_rad(),
            near,
            far,
            set.sh_degree,
        )?;
        for v in 1..poses.len() {
            p.poses[v] = PoseParams6D::from_pose(&poses[v]);
        }
        let first = &poses[0];
        for i in 0..set.len() {
            let local = first.to_view(&set.centers[i]);
            let (pixel, depth) = match project(&set.centers[i], intrinsics, first) {
                Projection::Visible { pixel, depth } => (pixel, depth),
                Projection::BehindCamera { .. } => {
                    return Err(Error::Argument(format!(
                        "primitive {i} is behind the first camera (z = {})",
                        local.z
                    )))
                }
            };
            p.anchors.push(Anchor {
                view: 0,
                pixel: [pixel.0, pixel.1],
            });
            p.depth_raw.push(depth_to_raw(depth, near, far)?);
        }
        p.quats = set.quats.clone();
        p.log_scales = set.log_scales.clone();
        p.opacity_logits = set.opacity_logits.clone();
        p.sh = set.sh.clone();
        Ok(p)
    }

    pub fn num_views(&self) -> usize {
        self.poses.len()
    }

    pub fn num_targets(&self) -> usize {
        self.poses.len() - self.num_context
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        sh_coeff_count(self.sh_degree) * 3
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fov_rad, self.width, self.height)
    }

    pub fn pose(&self, view: usize) -> Result<CameraPose> {
        self.poses
            .get(view)
            .ok_or_else(|| Error::Argument(format!("view {view} out of range")))?
            .decode()
    }

    pub fn decoded_poses(&self) -> Result<Vec<CameraPose>> {
        self.poses.iter().map(PoseParams6D::decode).collect()
    }

    /// Overwrites the raw parameters of a non-canonical view.
    pub fn set_pose(&mut self, view: usize, pose: &CameraPose) -> Result<()> {
        if view == 0 || view >= self.poses.len() {
            return Err(Error::Argument(format!("view {view} is not an optimizable view")));
        }
        self.poses[view] = PoseParams6D::from_pose(pose);
        Ok(())
    }

    /// Appends a primitive anchored at `pixel` of context view `view`.
    pub fn push(
        &mut self,
        anchor: Anchor,
        depth_raw: f64,
        quat: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        sh: &[f64],
    ) -> Result<()> {
        if anchor.view >= self.num_context {
            return Err(Error::Argument(format!("anchor view {} is not a context view", anchor.view)));
        }
        if sh.len() != self.sh_stride() {
            return Err(Error::Argument(format!("expected {} SH values, got {}", self.sh_stride(), sh.len())));
        }
        self.anchors.push(anchor);
        self.depth_raw.push(depth_raw);
        self.quats.push(quat);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
        Ok(())
    }

    pub fn activated_depth(&self, i: usize) -> f64 {
        self.near + crate::gaussian::sigmoid(self.depth_raw[i]) * (self.far - self.near)
    }

    /// Canonical-frame centers lifted from each anchor's ray and depth.
    pub fn centers(&self) -> Result<Vec<Vec3>> {
        let k = self.intrinsics()?;
        let poses = self.decoded_poses()?;
        Ok((0..self.len())
            .map(|i| {
                let a = &self.anchors[i];
                let ray = k.ray(a.pixel[0], a.pixel[1]);
                poses[a.view].transform_point(&(ray * self.activated_depth(i)))
            })
            .collect())
    }

    pub fn gaussians(&self) -> Result<GaussianSet> {
        Ok(GaussianSet {
            sh_degree: self.sh_degree,
            centers: self.centers()?,
            quats: self.quats.clone(),
            log_scales: self.log_scales.clone(),
            opacity_logits: self.opacity_logits.clone(),
            sh: self.sh.clone(),
        })
    }

    /// Activated depths of the primitives anchored on `view`, in anchor order.
    pub fn view_depths(&self, view: usize) -> Vec<f64> {
        (0..self.len())
            .filter(|&i| self.anchors[i].view == view)
            .map(|i| self.activated_depth(i))
            .collect()
    }

    /// Views whose poses belong to `class`.
    pub fn class_views(&self, class: ParamClass) -> std::ops::Range<usize> {
        match class {
            ParamClass::ContextPose => 1.min(self.num_context)..self.num_context,
            ParamClass::TargetPose => self.num_context..self.num_views(),
            _ => 0..0,
        }
    }

    pub fn class_len(&self, class: ParamClass) -> usize {
        match class {
            ParamClass::Sh => self.sh.len(),
            ParamClass::Opacity => self.opacity_logits.len(),
            ParamClass::Scale => self.log_scales.len() * 3,
            ParamClass::Quat => self.quats.len() * 4,
            ParamClass::Depth => self.depth_raw.len(),
            ParamClass::ContextPose | ParamClass::TargetPose => {
                self.class_views(class).len() * PoseParams6D::LEN
            }
            ParamClass::Fov => 1,
        }
    }

    /// Flat copy of one class's raw values.
    pub fn values(&self, class: ParamClass) -> Vec<f64> {
        match class {
            ParamClass::Sh => self.sh.clone(),
            ParamClass::Opacity => self.opacity_logits.clone(),
            ParamClass::Scale => self.log_scales.iter().flatten().copied().collect(),
            ParamClass::Quat => self.quats.iter().flatten().copied().collect(),
            ParamClass::Depth => self.depth_raw.clone(),
            ParamClass::ContextPose | ParamClass::TargetPose => self
                .class_views(class)
                .flat_map(|v| self.poses[v].to_array())
                .collect(),
            ParamClass::Fov => vec![self.fov_rad],
        }
    }

    /// Inverse of [`SceneParameters::values`].
    pub fn set_values(&mut self, class: ParamClass, values: &[f64]) -> Result<()> {
        if values.len() != self.class_len(class) {
            return Err(Error::Argument(format!(
                "class {class} holds {} values, got {}",
                self.class_len(class),
                values.len()
            )));
        }
        match class {
            ParamClass::Sh => self.sh.copy_from_slice(values),
            ParamClass::Opacity => self.opacity_logits.copy_from_slice(values),
            ParamClass::Scale => {
                for (dst, src) in self.log_scales.iter_mut().zip(values.chunks_exact(3)) {
                    dst.copy_from_slice(src);
                }
            }
            ParamClass::Quat => {
                for (dst, src) in self.quats.iter_mut().zip(values.chunks_exact(4)) {
                    dst.copy_from_slice(src);
                }
            }
            ParamClass::Depth => self.depth_raw.copy_from_slice(values),
            ParamClass::ContextPose | ParamClass::TargetPose => {
                for (v, src) in self.class_views(class).zip(values.chunks_exact(PoseParams6D::LEN)) {
                    self.poses[v] = PoseParams6D::from_slice(src);
                }
            }
            ParamClass::Fov => self.fov_rad = values[0],
        }
        Ok(())
    }

    /// Checks that every pose decodes and the field of view is valid.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        for (v, p) in self.poses.iter().enumerate() {
            p.decode()
                .map_err(|e| Error::Degenerate(format!("view {v}: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    fn toy() -> SceneParameters {
        let mut p = SceneParameters::empty(8, 6, 2, 1, 1.0, 0.1, 10.0, 0).unwrap();
        p.push(
            Anchor { view: 1, pixel: [2.0, 3.0] },
            0.3,
            [1.0, 0.0, 0.0, 0.0],
            [-1.0; 3],
            0.5,
            &[0.1, 0.2, 0.3],
        )
        .unwrap();
        p.set_pose(1, &CameraPose::new(axis_angle(&Vec3::y(), 0.2), Vec3::new(0.5, 0.0, 0.1)).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn class_values_round_trip() {
        let mut p = toy();
        for class in ParamClass::ALL {
            let v = p.values(class);
            assert_eq!(v.len(), p.class_len(class));
            let bumped: Vec<f64> = v.iter().map(|x| x + 0.25).collect();
            p.set_values(class, &bumped).unwrap();
            assert_eq!(p.values(class), bumped);
        }
        assert_eq!(p.class_len(ParamClass::ContextPose), 10);
        assert_eq!(p.class_len(ParamClass::TargetPose), 10);
        assert!(p.set_values(ParamClass::Fov, &[]).is_err());
    }

    #[test]
    fn canonical_view_is_not_settable() {
        let mut p = toy();
        assert!(p.set_pose(0, &CameraPose::identity()).is_err());
        assert_eq!(p.poses[0], PoseParams6D::identity());
    }

    #[test]
    fn centers_lie_on_anchor_rays() {
        let p = toy();
        let c = p.centers().unwrap()[0];
        let pose = p.pose(1).unwrap();
        let local = pose.to_view(&c);
        assert!((local.z - p.activated_depth(0)).abs() < 1e-12);
        let k = p.intrinsics().unwrap();
        let ((u, v), _) = project(&c, &k, &pose).visible().unwrap();
        assert!((u - 2.0).abs() < 1e-9 && (v - 3.0).abs() < 1e-9);
    }

    #[test]
    fn from_gaussians_reproduces_centers() {
        let mut set = GaussianSet::empty(0);
        set.push(Vec3::new(0.3, -0.2, 2.0), [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 1.0, &[0.0; 3]);
        set.push(Vec3::new(-0.5, 0.1, 3.5), [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 1.0, &[0.0; 3]);
        let k = CameraIntrinsics::new(1.0, 16, 16).unwrap();
        let poses = [CameraPose::identity(), CameraPose::identity()];
        let p = SceneParameters::from_gaussians(&set, &k, &poses, 1, 0.1, 10.0).unwrap();
        for (a, b) in p.centers().unwrap().iter().zip(&set.centers) {
            assert!((a - b).norm() < 1e-12);
        }
        set.centers[0].z = -1.0;
        assert!(SceneParameters::from_gaussians(&set, &k, &poses, 1, 0.1, 10.0).is_err());
    }

    #[test]
    fn class_list_parsing() {
        assert_eq!(
            parse_class_list("pose,fov").unwrap(),
            vec![ParamClass::ContextPose, ParamClass::TargetPose, ParamClass::Fov]
        );
        assert!(parse_class_list("bogus").is_err());
    }
}
