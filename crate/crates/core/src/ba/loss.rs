//! Rendering loss, pose supervision loss and scale normalization.

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Mat3, PoseParams6D, Vec3};
use crate::image::{Image, ScalarImage};
use crate::metrics::PerceptualLoss;

pub const ROTATION_LOSS_WEIGHT: f64 = 0.1;
pub const TRANSLATION_LOSS_WEIGHT: f64 = 0.01;

/// Mean squared error plus an optional weighted perceptual term, with the
/// gradient of the total with respect to `rendered`.
pub fn rendering_loss(
    rendered: &Image,
    target: &Image,
    gamma: f64,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(f64, Image)> {
    if rendered.dims() != target.dims() {
        return Err(Error::Argument(format!(
            "rendered image is {}x{} but the target is {}x{}",
            rendered.width(),
            rendered.height(),
            target.width(),
            target.height()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Argument(format!("perceptual weight must be non-negative, got {gamma}")));
    }
    let n = rendered.data().len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(rendered.data().len());
    for (r, t) in rendered.data().iter().zip(target.data()) {
        let d = r - t;
        sum += d * d;
        grad.push(2.0 * d / n);
    }
    let mut loss = sum / n;
    let mut grad = Image::from_vec(rendered.width(), rendered.height(), grad)?;
    if let Some(p) = perceptual.filter(|_| gamma > 0.0) {
        let (pl, pg) = p.evaluate(rendered, target)?;
        loss += gamma * pl;
        for (g, x) in grad.data_mut().iter_mut().zip(pg.data()) {
            *g += gamma * x;
        }
    }
    Ok((loss, grad))
}

/// `0.1 * geodesic(R_pred, R_gt) + 0.01 * |T_pred - T_gt|`, radians and scene units.
pub fn pose_supervision_loss(pred: &CameraPose, gt: &CameraPose) -> f64 {
    ROTATION_LOSS_WEIGHT * crate::geometry::geodesic_distance(&pred.rotation, &gt.rotation)
        + TRANSLATION_LOSS_WEIGHT * (pred.translation - gt.translation).norm()
}

/// Pose supervision loss of raw parameters and its gradient with respect to them.
///
/// Both terms are non-smooth at zero error; the gradient there is taken as zero.
pub fn pose_supervision_loss_with_grad(pred: &PoseParams6D, gt: &CameraPose) -> Result<(f64, [f64; 10])> {
    let pose = pred.decode()?;
    let m = pose.rotation.transpose() * gt.rotation;
    let v = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
    let s = v.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);

    let mut d_m = Mat3::zeros();
    if s > 0.0 {
        // theta = atan2(s, c)
        let r2 = s * s + c * c;
        let (ds, dc) = (c / r2, -s / r2);
        let u = v / s * ds * 0.5;
        d_m[(2, 1)] += u.x;
        d_m[(1, 2)] -= u.x;
        d_m[(0, 2)] += u.y;
        d_m[(2, 0)] -= u.y;
        d_m[(1, 0)] += u.z;
        d_m[(0, 1)] -= u.z;
        for i in 0..3 {
            d_m[(i, i)] += dc * 0.5;
        }
    }
    // M = P^T G, so dL/dP = G dM^T.
    let d_rot = gt.rotation * d_m.transpose() * ROTATION_LOSS_WEIGHT;
    let diff = pose.translation - gt.translation;
    let dist = diff.norm();
    let d_trans = if dist > 0.0 {
        diff / dist * TRANSLATION_LOSS_WEIGHT
    } else {
        Vec3::zeros()
    };
    let loss = ROTATION_LOSS_WEIGHT * theta + TRANSLATION_LOSS_WEIGHT * dist;
    Ok((loss, pred.backward(&d_rot, &d_trans)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Divides depths and translations by the median of all valid
/// (positive, finite) depths and returns the factor used.
pub fn normalize_scale(depths: &[ScalarImage], translations: &[Vec3]) -> Result<(Vec<ScalarImage>, Vec<Vec3>, f64)> {
    let valid: Vec<f64> = depths
        .iter()
        .flat_map(|d| d.data().iter().copied())
        .filter(|d| *d > 0.0 && d.is_finite())
        .collect();
    if valid.is_empty() {
        return Err(Error::Argument("no valid depth values to normalize by".into()));
    }
    let factor = median(valid);
    Ok((
        depths.iter().map(|d| d.map(|v| v / factor)).collect(),
        translations.iter().map(|t| t / factor).collect(),
        factor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use std::f64::consts::PI;

    #[test]
    fn rendering_loss_examples() {
        let t = Image::from_fn(6, 5, |x, y| [0.1 * x as f64, 0.05 * y as f64, 0.3]);
        let (l, g) = rendering_loss(&t, &t, 0.0, None).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let shifted = Image::from_vec(6, 5, t.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let (l, _) = rendering_loss(&shifted, &t, 0.0, None).unwrap();
        assert!((l - 0.01).abs() < 1e-15, "{l}");
        assert!(rendering_loss(&t, &Image::new(5, 5), 0.0, None).is_err());
    }

    #[test]
    fn rendering_loss_gradient_matches_finite_differences() {
        let a = Image::from_fn(12, 11, |x, y| [((x * y) as f64 * 0.1).sin().abs(), 0.2, (x as f64 * 0.3).cos().abs()]);
        let b = Image::from_fn(12, 11, |x, y| [0.5, ((x + y) as f64 * 0.2).sin().abs(), 0.1]);
        let ssim = crate::metrics::SsimLoss;
        for (gamma, p) in [(0.0, None), (0.05, Some(&ssim as &dyn PerceptualLoss))] {
            let (_, g) = rendering_loss(&a, &b, gamma, p).unwrap();
            for k in [0, 17, 200, 395] {
                let h = 1e-6;
                let mut ap = a.clone();
                ap.data_mut()[k] += h;
                let mut am = a.clone();
                am.data_mut()[k] -= h;
                let n = (rendering_loss(&ap, &b, gamma, p).unwrap().0 - rendering_loss(&am, &b, gamma, p).unwrap().0)
                    / (2.0 * h);
                assert!((n - g.data()[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pose_loss_examples() {
        let p = CameraPose::new(axis_angle(&Vec3::x(), 0.4), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(pose_supervision_loss(&p, &p), 0.0);
        let flipped = CameraPose::new(axis_angle(&Vec3::z(), PI), Vec3::zeros()).unwrap();
        assert!((pose_supervision_loss(&flipped, &CameraPose::identity()) - 0.1 * PI).abs() < 1e-12);
        let moved = CameraPose::new(Mat3::identity(), Vec3::new(0.0, 2.0, 0.0)).unwrap();
        assert!((pose_supervision_loss(&moved, &CameraPose::identity()) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn pose_loss_gradient_matches_finite_differences() {
        let gt = CameraPose::new(axis_angle(&Vec3::new(1.0, 2.0, 0.5).normalize(), 0.7), Vec3::new(0.3, -0.2, 1.0)).unwrap();
        let pred = PoseParams6D {
            rot6: [0.9, 0.2, -0.1, 0.1, 1.1, 0.3],
            trans_h: [0.1, 0.4, 0.2, 0.8],
        };
        let (l, g) = pose_supervision_loss_with_grad(&pred, &gt).unwrap();
        assert!((l - pose_supervision_loss(&pred.decode().unwrap(), &gt)).abs() < 1e-12);
        let base = pred.to_array();
        for k in 0..10 {
            let h = 1e-6;
            let mut a = base;
            a[k] += h;
            let mut b = base;
            b[k] -= h;
            let f = |x: [f64; 10]| pose_supervision_loss(&PoseParams6D::from_slice(&x).decode().unwrap(), &gt);
            let n = (f(a) - f(b)) / (2.0 * h);
            assert!((n - g[k]).abs() < 1e-7, "{k}: {n} vs {}", g[k]);
        }
    }

    #[test]
    fn normalize_scale_examples() {
        let d = ScalarImage::filled(3, 2, 4.0);
        let (out, t, f) = normalize_scale(&[d], &[Vec3::new(4.0, 8.0, 0.0)]).unwrap();
        assert_eq!(f, 4.0);
        assert!(out[0].data().iter().all(|&v| v == 1.0));
        assert_eq!(t[0], Vec3::new(1.0, 2.0, 0.0));
        let (again, t2, f2) = normalize_scale(&out, &t).unwrap();
        assert_eq!((again, t2, f2), (out, t, 1.0));
        assert!(normalize_scale(&[ScalarImage::new(2, 2)], &[]).is_err());
    }
}
