//! Reverse-mode pass from an image-space color gradient to Gaussian
//! parameters, the target camera pose and the focal length.

use nalgebra::Matrix2x3;

use super::{composite_pixel, projection_jacobian, Contribution, Mat2, RenderTape};
use crate::error::{Error, Result};
use crate::gaussian::{build_covariance_backward, eval_sh_backward, GaussianSet};
use crate::geometry::{Mat3, Vec3};
use crate::image::Image;
use crate::par;

/// Gradients of a scalar loss with respect to one rendered view's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub d_center: Vec<Vec3>,
    pub d_quat: Vec<[f64; 4]>,
    pub d_log_scale: Vec<[f64; 3]>,
    pub d_opacity_logit: Vec<f64>,
    /// Flat, same layout as [`GaussianSet::sh`].
    pub d_sh: Vec<f64>,
    /// With respect to the target pose rotation (view to canonical).
    pub d_rotation: Mat3,
    /// With respect to the target pose translation.
    pub d_translation: Vec3,
    pub d_focal: f64,
}

impl SplatGradients {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            d_center: vec![Vec3::zeros(); n],
            d_quat: vec![[0.0; 4]; n],
            d_log_scale: vec![[0.0; 3]; n],
            d_opacity_logit: vec![0.0; n],
            d_sh: vec![0.0; n * sh_stride],
            d_rotation: Mat3::zeros(),
            d_translation: Vec3::zeros(),
            d_focal: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_center.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_quat.iter().flatten().all(|x| x.is_finite())
            && self.d_log_scale.iter().flatten().all(|x| x.is_finite())
            && self.d_opacity_logit.iter().all(|x| x.is_finite())
            && self.d_sh.iter().all(|x| x.is_finite())
            && self.d_rotation.iter().all(|x| x.is_finite())
            && self.d_translation.iter().all(|x| x.is_finite())
            && self.d_focal.is_finite()
    }
}

/// Screen-space gradient of one primitive.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 4],
    opacity: f64,
    rgb: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..4 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        for k in 0..3 {
            self.rgb[k] += o.rgb[k];
        }
    }
}

/// Backward pass of one tile into slot-indexed private buffers.
fn tile_backward(tape: &RenderTape, t: usize, d_color: &Image) -> Vec<ScreenGrad> {
    let (x0, x1, y0, y1) = tape.tile_rect(t);
    let list = &tape.tiles[t];
    let mut grads = vec![ScreenGrad::default(); list.len()];
    let mut scratch: Vec<Contribution> = Vec::new();
    let bg = tape.background;
    for y in y0..y1 {
        for x in x0..x1 {
            let g_px = d_color.pixel(x, y);
            if g_px == [0.0; 3] {
                continue;
            }
            scratch.clear();
            composite_pixel(
                x as f64,
                y as f64,
                list,
                &tape.splats,
                &tape.config,
                &bg,
                |c| scratch.push(c),
            );
            // Reverse sweep. `suffix` is the background-relative color of
            // everything behind the current primitive, already attenuated
            // by the primitives between them.
            let mut suffix = 0.0;
            for c in scratch.iter().rev() {
                let s = tape.splats[c.index].as_ref().expect("contributing primitive");
                let ci = (0..3).map(|k| (s.rgb[k] - bg[k]) * g_px[k]).sum::<f64>();
                let d_a = c.t * (ci - suffix);
                suffix = c.a * ci + (1.0 - c.a) * suffix;

                let gr = &mut grads[c.slot];
                let w = c.t * c.a;
                for k in 0..3 {
                    gr.rgb[k] += w * g_px[k];
                }
                gr.opacity += d_a * c.g;
                let d_m = d_a * s.opacity * (-0.5 * c.g);
                let q = &s.conic;
                gr.mean[0] -= d_m * ((q[(0, 0)] + q[(0, 0)]) * c.dx + (q[(0, 1)] + q[(1, 0)]) * c.dy);
                gr.mean[1] -= d_m * ((q[(1, 0)] + q[(0, 1)]) * c.dx + (q[(1, 1)] + q[(1, 1)]) * c.dy);
                gr.conic[0] += d_m * c.dx * c.dx;
                gr.conic[1] += d_m * c.dx * c.dy;
                gr.conic[2] += d_m * c.dy * c.dx;
                gr.conic[3] += d_m * c.dy * c.dy;
            }
        }
    }
    grads
}

/// Per-primitive result of the chain from screen space to 3D.
struct PrimitiveGrad {
    center: Vec3,
    quat: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: Vec<f64>,
    rotation: Mat3,
    translation: Vec3,
    focal: f64,
}

fn primitive_backward(
    set: &GaussianSet,
    tape: &RenderTape,
    i: usize,
    sg: &ScreenGrad,
) -> Option<PrimitiveGrad> {
    let s = tape.splats[i].as_ref()?;
    let pose = &tape.pose;
    let f = tape.intrinsics.focal();
    let w = pose.rotation.transpose();
    let center = set.centers[i];
    let rel = center - pose.translation;
    let x = s.x_view;
    let iz = 1.0 / x.z;

    // Conic -> 2D covariance: dC = -Q^T dQ Q^T.
    let d_conic = Mat2::new(sg.conic[0], sg.conic[1], sg.conic[2], sg.conic[3]);
    let qt = s.conic.transpose();
    let d_cov2d = -qt * d_conic * qt;

    // cov2d = J M J^T + blur, M = W Sigma W^T.
    let cov3d = set.covariance(i).ok()?;
    let j = projection_jacobian(&x, f);
    let m = w * cov3d * w.transpose();
    let d_j: Matrix2x3<f64> = d_cov2d * j * m.transpose() + d_cov2d.transpose() * j * m;
    let d_m = j.transpose() * d_cov2d * j;
    let d_sigma = w.transpose() * d_m * w;
    let mut d_w = d_m * w * cov3d.transpose() + d_m.transpose() * w * cov3d;

    // Jacobian entries and the projected mean depend on x and f.
    let mut d_x = Vec3::zeros();
    let mut d_f = 0.0;
    let iz2 = iz * iz;
    d_x.x += d_j[(0, 2)] * (-f * iz2);
    d_x.y += d_j[(1, 2)] * (-f * iz2);
    d_x.z += (d_j[(0, 0)] + d_j[(1, 1)]) * (-f * iz2)
        + d_j[(0, 2)] * (2.0 * f * x.x * iz2 * iz)
        + d_j[(1, 2)] * (2.0 * f * x.y * iz2 * iz);
    d_f += (d_j[(0, 0)] + d_j[(1, 1)]) * iz - d_j[(0, 2)] * x.x * iz2 - d_j[(1, 2)] * x.y * iz2;

    let [du, dv] = sg.mean;
    d_x.x += du * f * iz;
    d_x.y += dv * f * iz;
    d_x.z -= (du * x.x + dv * x.y) * f * iz2;
    d_f += (du * x.x + dv * x.y) * iz;

    // x = W (mu - T).
    let mut d_center = w.transpose() * d_x;
    let mut d_translation = -d_center;
    d_w += d_x * rel.transpose();

    // Color through the view direction (mu - T) / |mu - T|.
    let mut d_sh = vec![0.0; set.sh_stride()];
    let d_dir = eval_sh_backward(
        set.sh_of(i),
        set.sh_degree,
        &s.view_dir,
        s.rgb_active,
        sg.rgb,
        &mut d_sh,
    );
    if s.view_dist > 0.0 {
        let dir = s.view_dir;
        let d_off = (d_dir - dir * dir.dot(&d_dir)) / s.view_dist;
        d_center += d_off;
        d_translation -= d_off;
    }

    let (d_quat, d_log_scale) = build_covariance_backward(&set.quats[i], &set.log_scales[i], &d_sigma);
    let op = s.opacity;
    Some(PrimitiveGrad {
        center: d_center,
        quat: d_quat,
        log_scale: d_log_scale,
        opacity_logit: sg.opacity * op * (1.0 - op),
        sh: d_sh,
        // W = R^T.
        rotation: d_w.transpose(),
        translation: d_translation,
        focal: d_f,
    })
}

/// Gradient of `<d_color, render(set).color>` for a tape produced from `set`.
pub fn render_backward_gaussians(
    set: &GaussianSet,
    tape: &RenderTape,
    d_color: &Image,
) -> Result<SplatGradients> {
    if tape.num_primitives != set.len() {
        return Err(Error::Usage(format!(
            "render tape holds {} primitives but the set has {}",
            tape.num_primitives,
            set.len()
        )));
    }
    if d_color.dims() != (tape.width(), tape.height()) {
        return Err(Error::Argument(format!(
            "color gradient is {}x{} but the render is {}x{}",
            d_color.width(),
            d_color.height(),
            tape.width(),
            tape.height()
        )));
    }
    let per_tile = par::map_indexed(tape.tile_count(), tape.config.parallel, |t| {
        tile_backward(tape, t, d_color)
    });
    let mut screen = vec![ScreenGrad::default(); set.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            screen[tape.tiles[t][slot] as usize].add(g);
        }
    }
    let per_prim = par::map_indexed(set.len(), tape.config.parallel, |i| {
        primitive_backward(set, tape, i, &screen[i])
    });

    let stride = set.sh_stride();
    let mut out = SplatGradients::zeros(set.len(), stride);
    for (i, g) in per_prim.into_iter().enumerate() {
        let Some(g) = g else { continue };
        out.d_center[i] = g.center;
        out.d_quat[i] = g.quat;
        out.d_log_scale[i] = g.log_scale;
        out.d_opacity_logit[i] = g.opacity_logit;
        out.d_sh[i * stride..(i + 1) * stride].copy_from_slice(&g.sh);
        out.d_rotation += g.rotation;
        out.d_translation += g.translation;
        out.d_focal += g.focal;
    }
    Ok(out)
}
