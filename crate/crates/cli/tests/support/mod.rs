//! Untiled reference compositor: every pixel walks every visible primitive
//! in global (depth, index) order. No binning, no bounding boxes.

use nas3r_core::gaussian::{eval_sh, GaussianSet};
use nas3r_core::geometry::{CameraIntrinsics, CameraPose, Vec3};
use nas3r_core::image::{Image, ScalarImage};
use nas3r_core::render::{project_gaussian, Mat2, RenderConfig};

struct Visible {
    index: usize,
    mean: [f64; 2],
    conic: Mat2,
    depth: f64,
    rgb: [f64; 3],
    opacity: f64,
}

pub fn reference_render(
    set: &GaussianSet,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> (Image, ScalarImage, ScalarImage) {
    let mut visible = Vec::new();
    for i in 0..set.len() {
        let center = set.centers[i];
        let Some(p) = project_gaussian(&center, &set.covariance(i).unwrap(), intrinsics, pose, cfg) else {
            continue;
        };
        let offset = center - pose.center();
        let dir = if offset.norm() > 0.0 { offset / offset.norm() } else { Vec3::z() };
        visible.push(Visible {
            index: i,
            mean: p.mean2d,
            conic: p.cov2d.try_inverse().unwrap(),
            depth: p.depth,
            rgb: eval_sh(set.sh_of(i), &dir, set.sh_degree).unwrap(),
            opacity: set.opacity(i),
        });
    }
    visible.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let (w, h) = (intrinsics.width(), intrinsics.height());
    let mut color = Image::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha = ScalarImage::new(w, h);
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0f64;
            let mut acc = [0.0f64; 3];
            let (mut wsum, mut dsum) = (0.0f64, 0.0f64);
            for v in &visible {
                let dx = x as f64 - v.mean[0];
                let dy = y as f64 - v.mean[1];
                let q = &v.conic;
                let m = q[(0, 0)] * dx * dx + (q[(0, 1)] + q[(1, 0)]) * dx * dy + q[(1, 1)] * dy * dy;
                if m > cutoff2 {
                    continue;
                }
                let a = v.opacity * (-0.5 * m).exp();
                if a < cfg.min_weight {
                    continue;
                }
                let wgt = t * a;
                for c in 0..3 {
                    acc[c] += wgt * v.rgb[c];
                }
                wsum += wgt;
                dsum += wgt * v.depth;
                t *= 1.0 - a;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            let rest = 1.0 - wsum;
            color.set_pixel(x, y, std::array::from_fn(|c| acc[c] + rest * background[c]));
            alpha.set(x, y, wsum);
            depth.set(x, y, dsum / wsum.max(cfg.depth_eps));
        }
    }
    (color, depth, alpha)
}
