//! Rendering from [`SceneParameters`] and the full chain rule back to raw
//! parameters: depth logits and context poses through lifting, the target
//! pose through projection, and the shared field of view through both.

use super::{composite, prepare, render_backward_gaussians, RenderConfig, RenderOutput, RenderTape};
use crate::error::{Error, Result};
use crate::gaussian::{activate_depth_derivative, GaussianSet};
use crate::geometry::{focal_fov_derivative, CameraIntrinsics, CameraPose, Mat3, PoseParams6D, Vec3};
use crate::image::Image;
use crate::params::{ParamClass, SceneParameters};

/// Gradients with respect to every raw entry of [`SceneParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub d_center: Vec<Vec3>,
    pub d_quat: Vec<[f64; 4]>,
    pub d_log_scale: Vec<[f64; 3]>,
    pub d_opacity_logit: Vec<f64>,
    pub d_sh: Vec<f64>,
    pub d_depth_raw: Vec<f64>,
    /// One entry per view; the canonical view's entry is always zero.
    pub d_pose: Vec<[f64; 10]>,
    pub d_fov: f64,
}

impl RenderGradients {
    pub fn zeros(params: &SceneParameters) -> Self {
        let n = params.len();
        Self {
            d_center: vec![Vec3::zeros(); n],
            d_quat: vec![[0.0; 4]; n],
            d_log_scale: vec![[0.0; 3]; n],
            d_opacity_logit: vec![0.0; n],
            d_sh: vec![0.0; params.sh.len()],
            d_depth_raw: vec![0.0; n],
            d_pose: vec![[0.0; 10]; params.num_views()],
            d_fov: 0.0,
        }
    }

    pub fn add_assign(&mut self, o: &RenderGradients) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        for (x, y) in self.d_center.iter_mut().zip(&o.d_center) {
            *x += y;
        }
        add(&mut self.d_quat, &o.d_quat);
        add(&mut self.d_log_scale, &o.d_log_scale);
        add(&mut self.d_pose, &o.d_pose);
        for (x, y) in self.d_opacity_logit.iter_mut().zip(&o.d_opacity_logit) {
            *x += y;
        }
        for (x, y) in self.d_sh.iter_mut().zip(&o.d_sh) {
            *x += y;
        }
        for (x, y) in self.d_depth_raw.iter_mut().zip(&o.d_depth_raw) {
            *x += y;
        }
        self.d_fov += o.d_fov;
    }

    /// Flat gradient of one class, laid out like [`SceneParameters::values`].
    pub fn values(&self, params: &SceneParameters, class: ParamClass) -> Vec<f64> {
        match class {
            ParamClass::Sh => self.d_sh.clone(),
            ParamClass::Opacity => self.d_opacity_logit.clone(),
            ParamClass::Scale => self.d_log_scale.iter().flatten().copied().collect(),
            ParamClass::Quat => self.d_quat.iter().flatten().copied().collect(),
            ParamClass::Depth => self.d_depth_raw.clone(),
            ParamClass::ContextPose | ParamClass::TargetPose => params
                .class_views(class)
                .flat_map(|v| self.d_pose[v])
                .collect(),
            ParamClass::Fov => vec![self.d_fov],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_center.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_quat.iter().flatten().all(|x| x.is_finite())
            && self.d_log_scale.iter().flatten().all(|x| x.is_finite())
            && self.d_opacity_logit.iter().all(|x| x.is_finite())
            && self.d_sh.iter().all(|x| x.is_finite())
            && self.d_depth_raw.iter().all(|x| x.is_finite())
            && self.d_pose.iter().flatten().all(|x| x.is_finite())
            && self.d_fov.is_finite()
    }
}

/// Decoded scene state shared by the forward and backward passes.
struct Decoded {
    intrinsics: CameraIntrinsics,
    poses: Vec<CameraPose>,
    gaussians: GaussianSet,
}

fn decode(params: &SceneParameters) -> Result<Decoded> {
    let intrinsics = params.intrinsics()?;
    let poses = params.decoded_poses()?;
    let gaussians = params.gaussians()?;
    Ok(Decoded {
        intrinsics,
        poses,
        gaussians,
    })
}

/// Renders view `view` of the scene described by `params`.
pub fn render_view(
    params: &SceneParameters,
    view: usize,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<(RenderOutput, RenderTape)> {
    let tape = prepare_view(params, view, background, config)?;
    Ok((composite(&tape), tape))
}

/// The forward state of [`render_view`] without compositing any pixel.
pub(crate) fn prepare_view(
    params: &SceneParameters,
    view: usize,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<RenderTape> {
    if view >= params.num_views() {
        return Err(Error::Argument(format!("view {view} out of range")));
    }
    let d = decode(params)?;
    prepare(&d.gaussians, &d.intrinsics, &d.poses[view], background, config)
}

/// Gradient of `<d_color, render_view(params, view).color>` with respect to
/// all raw parameters. `tape` must come from [`render_view`] on the same inputs.
pub fn render_backward(
    params: &SceneParameters,
    view: usize,
    tape: &RenderTape,
    d_color: &Image,
) -> Result<RenderGradients> {
    let d = decode(params)?;
    if view >= params.num_views() || tape.pose != d.poses[view] || tape.intrinsics != d.intrinsics {
        return Err(Error::Usage(format!(
            "render tape does not match view {view} of these parameters"
        )));
    }
    let sg = render_backward_gaussians(&d.gaussians, tape, d_color)?;

    let k = &d.intrinsics;
    let f = k.focal();
    let (cx, cy) = k.principal_point();
    let mut out = RenderGradients::zeros(params);
    let mut d_rot = vec![Mat3::zeros(); params.num_views()];
    let mut d_trans = vec![Vec3::zeros(); params.num_views()];
    let mut d_focal = sg.d_focal;
    d_rot[view] += sg.d_rotation;
    d_trans[view] += sg.d_translation;

    // mu = R_v (depth * r) + T_v with r = ((u - cx) / f, (v - cy) / f, 1).
    for i in 0..params.len() {
        let g = sg.d_center[i];
        if g == Vec3::zeros() {
            continue;
        }
        let a = &params.anchors[i];
        let pose = &d.poses[a.view];
        let r = k.ray(a.pixel[0], a.pixel[1]);
        let depth = params.activated_depth(i);
        let rr = pose.rotation * r;
        out.d_depth_raw[i] =
            rr.dot(&g) * activate_depth_derivative(params.depth_raw[i], params.near, params.far);
        d_rot[a.view] += g * (r * depth).transpose();
        d_trans[a.view] += g;
        let dr_df = Vec3::new(-(a.pixel[0] - cx) / (f * f), -(a.pixel[1] - cy) / (f * f), 0.0);
        d_focal += depth * (pose.rotation * dr_df).dot(&g);
    }

    for v in 1..params.num_views() {
        out.d_pose[v] = params.poses[v].backward(&d_rot[v], &d_trans[v]);
    }
    out.d_pose[0] = [0.0; PoseParams6D::LEN];
    out.d_fov = d_focal * focal_fov_derivative(params.fov_rad, params.width);
    out.d_center = sg.d_center;
    out.d_quat = sg.d_quat;
    out.d_log_scale = sg.d_log_scale;
    out.d_opacity_logit = sg.d_opacity_logit;
    out.d_sh = sg.d_sh;
    Ok(out)
}
