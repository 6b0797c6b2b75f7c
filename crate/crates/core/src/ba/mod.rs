//! Photometric bundle adjustment: render every supervised view, compare it
//! with the observed image, and follow the analytic gradient with Adam on
//! all unfrozen parameter classes.

mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sh_coeff_count, SH_C0};
use crate::geometry::{normalize_poses, pose_angular_errors, CameraPose};
use crate::image::Image;
use crate::metrics::{PerceptualLoss, Psnr, SsimLoss};
use crate::params::{Anchor, ParamClass, SceneParameters};
use crate::render::{render_backward, render_view, RenderConfig, RenderGradients};

pub use loss::{
    normalize_scale, pose_supervision_loss, pose_supervision_loss_with_grad, rendering_loss,
    ROTATION_LOSS_WEIGHT, TRANSLATION_LOSS_WEIGHT,
};

/// Field of view whose focal length equals the image width.
pub fn full_image_fov() -> f64 {
    2.0 * 0.5f64.atan()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrMultipliers {
    pub pose: f64,
    pub fov: f64,
    pub depth: f64,
    pub gaussian: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            pose: 1.0,
            fov: 0.1,
            depth: 1.0,
            gaussian: 1.0,
        }
    }
}

impl LrMultipliers {
    pub fn for_class(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::ContextPose | ParamClass::TargetPose => self.pose,
            ParamClass::Fov => self.fov,
            ParamClass::Depth => self.depth,
            ParamClass::Sh | ParamClass::Opacity | ParamClass::Scale | ParamClass::Quat => self.gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    #[default]
    None,
    Ssim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BAConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Weight of the perceptual term; only used when `perceptual` is set.
    pub gamma: f64,
    pub perceptual: PerceptualKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_multipliers: LrMultipliers,
    /// Per-class gradient norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze: Vec<ParamClass>,
    /// Stop as soon as the loss is at or below this.
    pub loss_tol: f64,
    pub convergence_window: usize,
    /// Stop when a full window improves its minimum by less than this
    /// fraction of the previous window's minimum. `None` never stops early.
    pub min_window_improvement: Option<f64>,
    /// Also render and compare the context views.
    pub supervise_context: bool,
    pub background: [f64; 3],
    pub render: RenderConfig,
}

impl Default for BAConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_steps: 2000,
            gamma: 0.05,
            perceptual: PerceptualKind::None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_multipliers: LrMultipliers::default(),
            clip_norm: Some(10.0),
            freeze: Vec::new(),
            loss_tol: 0.0,
            convergence_window: 100,
            min_window_improvement: None,
            supervise_context: false,
            background: [0.0; 3],
            render: RenderConfig::default(),
        }
    }
}

impl BAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Argument(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Argument("invalid Adam moment coefficients".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::Argument("convergence window must be positive".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self, class: ParamClass) -> bool {
        self.freeze.contains(&class)
    }

    /// Freezes every class except `classes`.
    pub fn optimize_only(mut self, classes: &[ParamClass]) -> Self {
        self.freeze = ParamClass::ALL.into_iter().filter(|c| !classes.contains(c)).collect();
        self
    }

    pub(crate) fn perceptual_plugin(&self) -> Option<&'static dyn PerceptualLoss> {
        static SSIM: SsimLoss = SsimLoss;
        match self.perceptual {
            PerceptualKind::None => None,
            PerceptualKind::Ssim => Some(&SSIM),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FovInit {
    /// Focal length equal to the image width.
    FullImage,
    Known(f64),
}

/// Pixel-aligned initialization: identity poses, flat depth, one Gaussian per
/// context pixel colored from that pixel.
pub fn init_scene_parameters(
    context_images: &[Image],
    target_count: usize,
    fov: FovInit,
    near: f64,
    far: f64,
    sh_degree: usize,
) -> Result<SceneParameters> {
    let first = context_images
        .first()
        .ok_or_else(|| Error::Argument("at least one context image is required".into()))?;
    let (w, h) = first.dims();
    if context_images.iter().any(|im| im.dims() != (w, h)) {
        return Err(Error::Argument("context images differ in size".into()));
    }
    let fov_rad = match fov {
        FovInit::FullImage => full_image_fov(),
        FovInit::Known(f) => f,
    };
    let mut p = SceneParameters::empty(w, h, context_images.len(), target_count, fov_rad, near, far, sh_degree)?;
    let focal = p.intrinsics()?.focal();
    // Isotropic scale covering one pixel at the middle of the depth range.
    let log_scale = (0.5 * (near + far) / focal).ln();
    let mut sh = vec![0.0; sh_coeff_count(sh_degree) * 3];
    for (view, im) in context_images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let rgb = im.pixel(x, y);
                for c in 0..3 {
                    sh[c] = (rgb[c] - 0.5) / SH_C0;
                }
                p.push(
                    Anchor {
                        view,
                        pixel: [x as f64, y as f64],
                    },
                    0.0,
                    [1.0, 0.0, 0.0, 0.0],
                    [log_scale; 3],
                    0.0,
                    &sh,
                )?;
            }
        }
    }
    Ok(p)
}

/// Reference data used only for reporting, never for the loss.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    /// One pose per view, in any common frame.
    pub poses: Option<Vec<CameraPose>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: Psnr,
    /// Worst view, when ground-truth poses are known.
    pub rot_err_deg: Option<f64>,
    pub trans_err_deg: Option<f64>,
    pub fov_deg: f64,
}

#[derive(Debug, Clone)]
pub struct BAResult {
    /// Lowest-loss parameters seen.
    pub params: SceneParameters,
    pub best_loss: f64,
    pub history: Vec<HistoryRow>,
    /// Number of parameter updates applied.
    pub steps: usize,
    pub converged: bool,
}

pub const HISTORY_HEADER: &str = "step,loss,psnr,rot_err_deg,trans_err_deg,fov_deg";

/// History as CSV with the fixed column order of [`HISTORY_HEADER`].
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.loss,
            r.psnr,
            opt(r.rot_err_deg),
            opt(r.trans_err_deg),
            r.fov_deg
        );
    }
    out
}

/// Loss and gradient over a list of supervised `(view, image)` pairs,
/// averaged over the views.
pub fn evaluate_loss(
    params: &SceneParameters,
    supervision: &[(usize, Image)],
    config: &BAConfig,
    with_gradient: bool,
) -> Result<(f64, f64, Option<RenderGradients>)> {
    if supervision.is_empty() {
        return Err(Error::Argument("nothing to supervise".into()));
    }
    let scale = 1.0 / supervision.len() as f64;
    let mut total = 0.0;
    let mut mse_total = 0.0;
    let mut grads = with_gradient.then(|| RenderGradients::zeros(params));
    for (view, target) in supervision {
        let (out, tape) = render_view(params, *view, config.background, &config.render)?;
        let (l, mut g) = rendering_loss(&out.color, target, config.gamma, config.perceptual_plugin())?;
        total += l * scale;
        mse_total += crate::metrics::mse(&out.color, target)? * scale;
        if let Some(acc) = grads.as_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            acc.add_assign(&render_backward(params, *view, &tape, &g)?);
        }
    }
    Ok((total, mse_total, grads))
}

fn pose_errors(params: &SceneParameters, gt: &GroundTruth) -> Result<(Option<f64>, Option<f64>)> {
    let Some(gt_poses) = gt.poses.as_ref() else {
        return Ok((None, None));
    };
    if gt_poses.len() != params.num_views() {
        return Err(Error::Argument(format!(
            "{} ground-truth poses for {} views",
            gt_poses.len(),
            params.num_views()
        )));
    }
    let gt_norm = normalize_poses(gt_poses)?;
    let pred = params.decoded_poses()?;
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    for v in 1..params.num_views() {
        let (r, t) = pose_angular_errors(&pred[v], &gt_norm[v]);
        rot = rot.max(r);
        trans = trans.max(t);
    }
    Ok((Some(rot), Some(trans)))
}

/// Names the class responsible for an invalid state, for diagnostics.
fn offending_class(params: &SceneParameters, grads: Option<&RenderGradients>) -> ParamClass {
    if params.intrinsics().is_err() {
        return ParamClass::Fov;
    }
    for class in [ParamClass::ContextPose, ParamClass::TargetPose] {
        if params.class_views(class).any(|v| params.poses[v].decode().is_err()) {
            return class;
        }
    }
    for class in ParamClass::ALL {
        if !params.values(class).iter().all(|v| v.is_finite()) {
            return class;
        }
    }
    if let Some(g) = grads {
        for class in ParamClass::ALL {
            if !g.values(params, class).iter().all(|v| v.is_finite()) {
                return class;
            }
        }
    }
    // Nothing is individually invalid: blame the fastest-growing geometry.
    ParamClass::Scale
}

fn divergence(step: usize, params: &SceneParameters, grads: Option<&RenderGradients>, detail: String) -> Error {
    Error::Divergence {
        step,
        class: offending_class(params, grads).name().to_string(),
        detail,
    }
}

struct Adam {
    m: BTreeMap<ParamClass, Vec<f64>>,
    v: BTreeMap<ParamClass, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut SceneParameters, grads: &RenderGradients, config: &BAConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t);
        let bc2 = 1.0 - config.beta2.powi(self.t);
        for class in ParamClass::ALL {
            if config.is_frozen(class) || params.class_len(class) == 0 {
                continue;
            }
            let mut g = grads.values(params, class);
            if let Some(clip) = config.clip_norm {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
            let lr = config.lr * config.lr_multipliers.for_class(class);
            let m = self.m.entry(class).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(class).or_insert_with(|| vec![0.0; g.len()]);
            let mut values = params.values(class);
            for k in 0..g.len() {
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                values[k] -= lr * mh / (vh.sqrt() + config.eps);
            }
            params.set_values(class, &values)?;
        }
        Ok(())
    }
}

/// Runs Adam from `init` on the supervised views. Returns the best
/// parameters seen; view 0 is never updated.
pub fn optimize(
    init: SceneParameters,
    supervision: &[(usize, Image)],
    config: &BAConfig,
    gt: &GroundTruth,
) -> Result<BAResult> {
    optimize_with_observer(init, supervision, config, gt, |_, _| {})
}

/// [`optimize`] with a callback invoked before every update.
pub fn optimize_with_observer(
    init: SceneParameters,
    supervision: &[(usize, Image)],
    config: &BAConfig,
    gt: &GroundTruth,
    mut observer: impl FnMut(usize, &SceneParameters),
) -> Result<BAResult> {
    config.validate()?;
    init.validate()?;
    for (view, im) in supervision {
        if *view >= init.num_views() || im.dims() != (init.width, init.height) {
            return Err(Error::Argument(format!("supervision for view {view} does not fit the scene")));
        }
    }
    let mut params = init;
    let mut adam = Adam::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, SceneParameters)> = None;
    let mut converged = false;
    let mut steps = 0;
    let mut prev_window_min = f64::INFINITY;
    let mut window_min = f64::INFINITY;

    for step in 0..=config.max_steps {
        let last = step == config.max_steps;
        let (loss, mse, grads) = match evaluate_loss(&params, supervision, config, !last) {
            Ok(v) => v,
            Err(e) if step > 0 => return Err(divergence(step, &params, None, e.to_string())),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(divergence(step, &params, grads.as_ref(), format!("loss is {loss}")));
        }
        let (rot, trans) = pose_errors(&params, gt)?;
        history.push(HistoryRow {
            step,
            loss,
            psnr: Psnr::from_mse(mse),
            rot_err_deg: rot,
            trans_err_deg: trans,
            fov_deg: params.fov_rad.to_degrees(),
        });
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params.clone()));
        }
        if loss <= config.loss_tol {
            converged = true;
            break;
        }
        window_min = window_min.min(loss);
        if (step + 1) % config.convergence_window == 0 {
            if let Some(tol) = config.min_window_improvement {
                if prev_window_min.is_finite() && window_min > prev_window_min * (1.0 - tol) {
                    converged = true;
                    break;
                }
            }
            prev_window_min = window_min;
            window_min = f64::INFINITY;
        }
        if last {
            break;
        }
        let grads = grads.expect("gradient requested");
        if !grads.is_finite() {
            return Err(divergence(step, &params, Some(&grads), "non-finite gradient".into()));
        }
        observer(step, &params);
        adam.step(&mut params, &grads, config)?;
        steps += 1;
        if let Err(e) = params.validate() {
            return Err(divergence(step + 1, &params, None, e.to_string()));
        }
    }
    let (best_loss, params) = best.expect("at least one evaluation");
    Ok(BAResult {
        params,
        best_loss,
        history,
        steps,
        converged,
    })
}

/// Initializes pixel-aligned parameters from the context images and runs
/// bundle adjustment against the target images.
pub fn run_photometric_ba(
    context_images: &[Image],
    target_images: &[Image],
    fov: FovInit,
    near: f64,
    far: f64,
    config: &BAConfig,
    gt: &GroundTruth,
) -> Result<BAResult> {
    if target_images.is_empty() {
        return Err(Error::Argument("at least one target image is required".into()));
    }
    let init = init_scene_parameters(context_images, target_images.len(), fov, near, far, 0)?;
    let supervision = supervision_pairs(context_images, target_images, config.supervise_context);
    optimize(init, &supervision, config, gt)
}

/// `(view, image)` pairs in view order: targets follow the context views,
/// and the context views themselves are included only when `with_context`.
pub fn supervision_pairs(context_images: &[Image], target_images: &[Image], with_context: bool) -> Vec<(usize, Image)> {
    let nc = context_images.len();
    let mut pairs: Vec<(usize, Image)> = Vec::new();
    if with_context {
        pairs.extend(context_images.iter().cloned().enumerate());
    }
    pairs.extend(target_images.iter().enumerate().map(|(i, im)| (nc + i, im.clone())));
    pairs
}
