//! Image quality, relative-pose AUC and depth accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ScalarImage};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Argument("empty images".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// PSNR for unit dynamic range. Identical images have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Exact,
    Decibels(f64),
}

impl Psnr {
    pub fn decibels(self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Decibels(v) => v,
        }
    }

    pub fn is_exact(self) -> bool {
        self == Psnr::Exact
    }

    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Exact
        } else {
            Psnr::Decibels(10.0 * (1.0 / mse).log10())
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Exact => f.write_str("exact"),
            Psnr::Decibels(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Exact => s.serialize_str("exact"),
            Psnr::Decibels(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Decibels(v)),
            Raw::Text(t) if t == "exact" => Ok(Psnr::Exact),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR `{t}`"))),
        }
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

fn ssim_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    for (y, row) in w.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = g[y] / sum * g[x] / sum;
        }
    }
    w
}

/// Local statistics of one window position on one channel.
struct Moments {
    mu_a: f64,
    mu_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn moments(a: &Image, b: &Image, c: usize, x0: usize, y0: usize, w: &[[f64; SSIM_WINDOW]; SSIM_WINDOW]) -> Moments {
    let mut m = Moments {
        mu_a: 0.0,
        mu_b: 0.0,
        saa: 0.0,
        sbb: 0.0,
        sab: 0.0,
    };
    let width = a.width();
    for (dy, row) in w.iter().enumerate() {
        for (dx, &wt) in row.iter().enumerate() {
            let k = ((y0 + dy) * width + x0 + dx) * 3 + c;
            let (va, vb) = (a.data()[k], b.data()[k]);
            m.mu_a += wt * va;
            m.mu_b += wt * vb;
            m.saa += wt * va * va;
            m.sbb += wt * vb * vb;
            m.sab += wt * va * vb;
        }
    }
    m
}

fn check_ssim_dims(a: &Image, b: &Image) -> Result<()> {
    same_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Mean SSIM over all fully contained 11x11 windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_gradient(a: &Image, b: &Image) -> Result<(f64, Image)> {
    ssim_impl(a, b, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_dims(a, b)?;
    let w = ssim_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let nx = a.width() - SSIM_WINDOW + 1;
    let ny = a.height() - SSIM_WINDOW + 1;
    let count = (nx * ny * 3) as f64;
    let mut total = 0.0;
    let mut g = grad.then(|| Image::new(a.width(), a.height()));
    for c in 0..3 {
        for y0 in 0..ny {
            for x0 in 0..nx {
                let m = moments(a, b, c, x0, y0, &w);
                let var_a = m.saa - m.mu_a * m.mu_a;
                let var_b = m.sbb - m.mu_b * m.mu_b;
                let cov = m.sab - m.mu_a * m.mu_b;
                let a1 = 2.0 * m.mu_a * m.mu_b + c1;
                let a2 = 2.0 * cov + c2;
                let b1 = m.mu_a * m.mu_a + m.mu_b * m.mu_b + c1;
                let b2 = var_a + var_b + c2;
                let s = a1 * a2 / (b1 * b2);
                total += s;
                if let Some(g) = g.as_mut() {
                    let d_mu = (2.0 * m.mu_b * a2 - 2.0 * m.mu_b * a1) / (b1 * b2)
                        - s * (2.0 * m.mu_a / b1 - 2.0 * m.mu_a / b2);
                    let d_saa = -s / b2;
                    let d_sab = 2.0 * a1 / (b1 * b2);
                    let width = a.width();
                    for (dy, row) in w.iter().enumerate() {
                        for (dx, &wt) in row.iter().enumerate() {
                            let k = ((y0 + dy) * width + x0 + dx) * 3 + c;
                            let (va, vb) = (a.data()[k], b.data()[k]);
                            g.data_mut()[k] += wt * (d_mu + 2.0 * va * d_saa + vb * d_sab) / count;
                        }
                    }
                }
            }
        }
    }
    Ok((total / count, g))
}

/// Pluggable perceptual term: returns a loss and its gradient image.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, rendered: &Image, target: &Image) -> Result<(f64, Image)>;
}

/// `1 - SSIM`, the only built-in perceptual term.
#[derive(Debug, Clone, Copy, Default)]
pub struct SsimLoss;

impl PerceptualLoss for SsimLoss {
    fn name(&self) -> &str {
        "ssim"
    }

    fn evaluate(&self, rendered: &Image, target: &Image) -> Result<(f64, Image)> {
        let (s, mut g) = ssim_with_gradient(rendered, target)?;
        g.data_mut().iter_mut().for_each(|v| *v = -*v);
        Ok((1.0 - s, g))
    }
}

/// Per-pair relative pose error in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorSample {
    pub rot_err_deg: f64,
    pub trans_err_deg: f64,
    pub overall_deg: f64,
}

impl PoseErrorSample {
    pub fn new(rot_err_deg: f64, trans_err_deg: f64) -> Self {
        Self {
            rot_err_deg,
            trans_err_deg,
            overall_deg: rot_err_deg.max(trans_err_deg),
        }
    }
}

/// Normalized area under the recall-vs-error curve up to each threshold.
///
/// Sample `i` is recalled on `[e_i, t]`, so the integral of the step
/// function is `sum_i max(0, t - e_i) / n`.
pub fn pose_auc(samples: &[PoseErrorSample], thresholds_deg: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Argument("pose AUC needs at least one sample".into()));
    }
    if let Some(t) = thresholds_deg.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Argument(format!("AUC threshold must be positive, got {t}")));
    }
    if let Some(s) = samples.iter().find(|s| !(s.overall_deg >= 0.0)) {
        return Err(Error::Argument(format!("invalid pose error {}", s.overall_deg)));
    }
    let mut errs: Vec<f64> = samples.iter().map(|s| s.overall_deg).collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len() as f64;
    Ok(thresholds_deg
        .iter()
        .map(|&t| {
            let area: f64 = errs.iter().take_while(|&&e| e < t).map(|&e| t - e).sum();
            (area / (n * t)).clamp(0.0, 1.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean absolute relative error.
    pub rel: f64,
    /// Fraction of pixels with `max(pred / gt, gt / pred) < 1.25`.
    pub tau: f64,
}

pub const DEPTH_INLIER_RATIO: f64 = 1.25;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth accuracy over pixels where `mask` is set (all pixels when `None`)
/// and the ground truth is positive and finite.
pub fn depth_metrics(
    pred: &ScalarImage,
    gt: &ScalarImage,
    mask: Option<&[bool]>,
    align: bool,
) -> Result<DepthMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::Argument("predicted and reference depth sizes differ".into()));
    }
    if let Some(m) = mask {
        if m.len() != gt.data().len() {
            return Err(Error::Argument("depth mask size differs from the depth maps".into()));
        }
    }
    let idx: Vec<usize> = (0..gt.data().len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .filter(|&i| gt.data()[i] > 0.0 && gt.data()[i].is_finite() && pred.data()[i].is_finite())
        .collect();
    if idx.is_empty() {
        return Err(Error::Argument("no valid depth pixels".into()));
    }
    let scale = if align {
        let mp = median(idx.iter().map(|&i| pred.data()[i]).collect());
        let mg = median(idx.iter().map(|&i| gt.data()[i]).collect());
        if !(mp > 0.0) {
            return Err(Error::Argument(format!("median predicted depth {mp} is not positive")));
        }
        mg / mp
    } else {
        1.0
    };
    let mut rel = 0.0;
    let mut inliers = 0usize;
    for &i in &idx {
        let p = pred.data()[i] * scale;
        let g = gt.data()[i];
        rel += (p - g).abs() / g;
        if (p / g).max(g / p) < DEPTH_INLIER_RATIO {
            inliers += 1;
        }
    }
    let n = idx.len() as f64;
    Ok(DepthMetrics {
        rel: rel / n,
        tau: inliers as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    /// Direct sliding-window SSIM with population statistics.
    fn naive_ssim(a: &Image, b: &Image) -> f64 {
        let r = 5i64;
        let mut g = [0.0; 11];
        for (i, v) in g.iter_mut().enumerate() {
            *v = (-((i as f64 - 5.0).powi(2)) / 4.5).exp();
        }
        let gs: f64 = g.iter().sum();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for cy in r..a.height() as i64 - r {
                for cx in r..a.width() as i64 - r {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let wt = g[(dy + r) as usize] * g[(dx + r) as usize] / (gs * gs);
                            ma += wt * a.pixel((cx + dx) as usize, (cy + dy) as usize)[c];
                            mb += wt * b.pixel((cx + dx) as usize, (cy + dy) as usize)[c];
                        }
                    }
                    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let wt = g[(dy + r) as usize] * g[(dx + r) as usize] / (gs * gs);
                            let pa = a.pixel((cx + dx) as usize, (cy + dy) as usize)[c] - ma;
                            let pb = b.pixel((cx + dx) as usize, (cy + dy) as usize)[c] - mb;
                            va += wt * pa * pa;
                            vb += wt * pb * pb;
                            cv += wt * pa * pb;
                        }
                    }
                    total += (2.0 * ma * mb + c1) * (2.0 * cv + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1.0;
                }
            }
        }
        total / n
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Exact);
        let b = Image::filled(4, 4, [0.4; 3]);
        let Psnr::Decibels(db) = psnr(&a, &b).unwrap() else { panic!() };
        assert!((db - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, [0.31; 3]);
        assert!((psnr(&a, &c).unwrap().decibels() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(3, 4)).is_err());
        assert_eq!(serde_json::to_string(&Psnr::Exact).unwrap(), "\"exact\"");
    }

    #[test]
    fn ssim_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = random_image(&mut rng, 17, 14);
            let b = random_image(&mut rng, 17, 14);
            assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 12, 12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image::from_vec(12, 12, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        assert!(ssim(&Image::new(10, 12), &Image::new(10, 12)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let (_, g) = SsimLoss.evaluate(&a, &b).unwrap();
        for k in [0, 7, 100, 211, 400, a.data().len() - 1] {
            let h = 1e-6;
            let mut p = a.clone();
            p.data_mut()[k] += h;
            let mut m = a.clone();
            m.data_mut()[k] -= h;
            let n = (SsimLoss.evaluate(&p, &b).unwrap().0 - SsimLoss.evaluate(&m, &b).unwrap().0) / (2.0 * h);
            assert!((n - g.data()[k]).abs() < 1e-8, "{k}: {n} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn auc_examples() {
        let zero = vec![PoseErrorSample::new(0.0, 0.0); 4];
        assert_eq!(pose_auc(&zero, &[5.0, 10.0, 20.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(pose_auc(&[PoseErrorSample::new(5.0, 1.0)], &[10.0]).unwrap(), vec![0.5]);
        assert_eq!(pose_auc(&[PoseErrorSample::new(1.0, 12.0)], &[10.0]).unwrap(), vec![0.0]);
        assert!(pose_auc(&[], &[10.0]).is_err());
    }

    #[test]
    fn depth_examples() {
        let gt = ScalarImage::from_fn(5, 4, |x, y| 1.0 + x as f64 * 0.5 + y as f64);
        let m = depth_metrics(&gt, &gt, None, true).unwrap();
        assert_eq!((m.rel, m.tau), (0.0, 1.0));
        let scaled = gt.map(|d| 1.2 * d);
        let m = depth_metrics(&scaled, &gt, None, false).unwrap();
        assert!((m.rel - 0.2).abs() < 1e-12 && m.tau == 1.0);
        let doubled = gt.map(|d| 2.0 * d);
        let m = depth_metrics(&doubled, &gt, None, true).unwrap();
        assert_eq!((m.rel, m.tau), (0.0, 1.0));
        assert!(depth_metrics(&gt, &gt, Some(&[false; 20]), true).is_err());
    }

    proptest! {
        #[test]
        fn auc_monotone_in_threshold(errs in prop::collection::vec(0.0f64..40.0, 1..30), t in 0.1f64..30.0, dt in 0.0f64..10.0) {
            let s: Vec<_> = errs.iter().map(|&e| PoseErrorSample::new(e, e * 0.5)).collect();
            let a = pose_auc(&s, &[t, t + dt]).unwrap();
            prop_assert!(a[0] <= a[1] + 1e-15);
        }

        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 11);
            let b = random_image(&mut rng, 12, 11);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn aligned_depth_is_scale_invariant(seed in 0u64..1000, exp in -8i32..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = ScalarImage::from_fn(6, 5, |_, _| rng.random_range(0.5..5.0));
            let pred = gt.map(|d| d * 1.1 + 0.05);
            let lambda = 2f64.powi(exp);
            prop_assert_eq!(
                depth_metrics(&pred, &gt, None, true).unwrap(),
                depth_metrics(&pred.map(|d| d * lambda), &gt, None, true).unwrap()
            );
        }
    }
}
