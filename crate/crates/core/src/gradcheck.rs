//! Finite-difference verification of the analytic scene gradients.
//!
//! Each raw parameter is nudged by `±h` and the central difference of the
//! photometric loss is compared with the analytic value. The renderer has
//! hard thresholds (the 3-sigma footprint, the minimum contribution weight,
//! early termination, depth-order swaps, the color clamp), so a nudge
//! occasionally straddles a discontinuity. When the plain difference
//! disagrees, the entry is re-evaluated with every pixel's contributor list
//! and every clamped color channel frozen at the base point. If that
//! structure did change under the nudge and the frozen difference agrees,
//! the entry is reported as a kink rather than a failure.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::ba::{evaluate_loss, rendering_loss, BAConfig};
use crate::error::Result;
use crate::geometry::{axis_angle, CameraPose, Vec3};
use crate::image::Image;
use crate::par;
use crate::params::{Anchor, ParamClass, SceneParameters};
use crate::render::{pixel_structure, prepare_view, render_view, replay_structure, FrozenStructure, RenderTape};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Largest fraction of a class's entries that may be skipped as kinks.
    pub max_kink_fraction: f64,
    /// Check a random subset of this many entries per class.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Scales the analytic gradient of one class, to prove failures are caught.
    pub corrupt: Option<ParamClass>,
    pub parallel: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            max_kink_fraction: 1.0,
            max_entries: None,
            seed: 0,
            corrupt: None,
            parallel: true,
        }
    }
}

impl GradcheckConfig {
    pub fn tolerance(&self, analytic: f64, numeric: f64) -> f64 {
        (self.rel_tol * analytic.abs().max(numeric.abs())).max(self.abs_floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub kinks: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// Index and (analytic, numeric) pair of the worst non-kink entry.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub classes: Vec<ClassReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.passed)
    }
}

enum Outcome {
    /// Absolute error and numeric derivative.
    Pass(f64, f64),
    Fail(f64, f64),
    Kink,
}

/// Checks every class in `classes` on the loss `evaluate_loss` defines for
/// `supervision`.
pub fn gradcheck(
    params: &SceneParameters,
    supervision: &[(usize, Image)],
    ba: &BAConfig,
    classes: &[ParamClass],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut ba = ba.clone();
    ba.render.parallel = false;
    let (_, _, grads) = evaluate_loss(params, supervision, &ba, true)?;
    let grads = grads.expect("gradient requested");
    let loss = |p: &SceneParameters| evaluate_loss(p, supervision, &ba, false).map(|r| r.0);
    let bases = supervision
        .iter()
        .map(|(view, _)| render_view(params, *view, ba.background, &ba.render).map(|(out, tape)| (out.color, tape)))
        .collect::<Result<Vec<_>>>()?;
    let structures: Vec<FrozenStructure> = bases.iter().map(|(_, tape)| pixel_structure(tape)).collect();
    // The plain loss is a per-pixel sum unless a perceptual term is active,
    // so a nudge to one primitive only needs its footprint recomposited.
    let pixelwise = ba.gamma == 0.0 || ba.perceptual_plugin().is_none();

    let mut reports = Vec::new();
    for &class in classes {
        let mut analytic = grads.values(params, class);
        if cfg.corrupt == Some(class) {
            analytic.iter_mut().for_each(|g| *g = *g * 1.1 + 1e-3);
        }
        let base = params.values(class);
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < base.len() => {
                let mut r = rng::stream(cfg.seed, class.name());
                let mut e = index::sample(&mut r, base.len(), m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..base.len()).collect(),
        };
        let eval_at = |j: usize, delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut v = base.clone();
            v[j] += delta;
            p.set_values(class, &v)?;
            match primitive_of(params, class, j) {
                Some(i) if pixelwise => patched_loss(&p, supervision, &ba, &bases, i),
                _ => loss(&p),
            }
        };
        let frozen_at = |j: usize, delta: f64| -> Result<Option<(f64, bool)>> {
            let mut p = params.clone();
            let mut v = base.clone();
            v[j] += delta;
            p.set_values(class, &v)?;
            frozen_loss(&p, supervision, &ba, &structures)
        };
        let outcomes = par::map_indexed(entries.len(), cfg.parallel, |k| -> Result<Outcome> {
            let j = entries[k];
            let (fp, fm) = (eval_at(j, cfg.h)?, eval_at(j, -cfg.h)?);
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[j];
            let err = (a - numeric).abs();
            if err <= cfg.tolerance(a, numeric) {
                return Ok(Outcome::Pass(err, numeric));
            }
            let (Some((fp, moved_p)), Some((fm, moved_m))) = (frozen_at(j, cfg.h)?, frozen_at(j, -cfg.h)?) else {
                return Ok(Outcome::Fail(err, numeric));
            };
            let frozen = (fp - fm) / (2.0 * cfg.h);
            if (moved_p || moved_m) && (a - frozen).abs() <= cfg.tolerance(a, frozen) {
                Ok(Outcome::Kink)
            } else {
                Ok(Outcome::Fail(err, numeric))
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut report = ClassReport {
            class,
            checked: entries.len(),
            kinks: 0,
            failures: 0,
            max_abs_err: 0.0,
            worst: None,
            passed: true,
        };
        let mut worst_err = -1.0;
        for (k, o) in outcomes.iter().enumerate() {
            let (err, numeric) = match *o {
                Outcome::Kink => {
                    report.kinks += 1;
                    continue;
                }
                Outcome::Pass(e, n) => (e, n),
                Outcome::Fail(e, n) => {
                    report.failures += 1;
                    (e, n)
                }
            };
            report.max_abs_err = report.max_abs_err.max(err);
            if err > worst_err {
                worst_err = err;
                let j = entries[k];
                report.worst = Some((j, analytic[j], numeric));
            }
        }
        let kink_cap = (cfg.max_kink_fraction * entries.len() as f64).floor() as usize;
        report.passed = report.failures == 0 && report.kinks <= kink_cap;
        reports.push(report);
    }
    Ok(GradcheckReport { classes: reports })
}

/// Primitive owning entry `j` of a per-primitive class.
fn primitive_of(params: &SceneParameters, class: ParamClass, j: usize) -> Option<usize> {
    match class {
        ParamClass::Sh | ParamClass::Opacity | ParamClass::Scale | ParamClass::Quat | ParamClass::Depth => {
            Some(j / (params.class_len(class) / params.len()))
        }
        _ => None,
    }
}

/// The plain loss after only `primitive` changed: each view reuses its base
/// image outside the old and new footprints of that primitive. Bitwise equal
/// to a full render, since other splats and pixels are untouched.
fn patched_loss(
    p: &SceneParameters,
    supervision: &[(usize, Image)],
    ba: &BAConfig,
    bases: &[(Image, RenderTape)],
    primitive: usize,
) -> Result<f64> {
    let scale = 1.0 / supervision.len() as f64;
    let mut total = 0.0;
    for ((view, target), (base_color, base_tape)) in supervision.iter().zip(bases) {
        let tape = prepare_view(p, *view, ba.background, &ba.render)?;
        let mut color = base_color.clone();
        let boxes = [base_tape.footprint(primitive), tape.footprint(primitive)];
        for [x0, x1, y0, y1] in boxes.into_iter().flatten() {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    color.set_pixel(x, y, tape.pixel(x, y).color);
                }
            }
        }
        total += rendering_loss(&color, target, ba.gamma, ba.perceptual_plugin())?.0 * scale;
    }
    Ok(total)
}

/// The loss with contributor lists and color clamps pinned to `structures`,
/// and whether the unpinned renderer would have chosen differently. `None` when a
/// pinned primitive was culled outright.
fn frozen_loss(
    p: &SceneParameters,
    supervision: &[(usize, Image)],
    ba: &BAConfig,
    structures: &[FrozenStructure],
) -> Result<Option<(f64, bool)>> {
    let scale = 1.0 / supervision.len() as f64;
    let mut total = 0.0;
    let mut moved = false;
    for ((view, target), structure) in supervision.iter().zip(structures) {
        let (_, tape) = render_view(p, *view, ba.background, &ba.render)?;
        moved |= pixel_structure(&tape) != *structure;
        let Some(color) = replay_structure(&tape, structure) else {
            return Ok(None);
        };
        total += rendering_loss(&color, target, ba.gamma, ba.perceptual_plugin())?.0 * scale;
    }
    Ok(Some((total, moved)))
}

/// A seeded scene with `num_context` context views and one target view,
/// small random camera motion, and smooth random target images for every
/// view.
pub fn random_scene(
    seed: u64,
    primitives: usize,
    width: usize,
    height: usize,
    num_context: usize,
    sh_degree: usize,
) -> Result<(SceneParameters, Vec<(usize, Image)>)> {
    let mut r = rng::stream(seed, "gradcheck-scene");
    let fov = r.random_range(0.7..1.2);
    let mut p = SceneParameters::empty(width, height, num_context, 1, fov, 0.5, 4.0, sh_degree)?;
    for v in 1..p.num_views() {
        let axis = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let angle = r.random_range(-5.0f64..5.0).to_radians();
        let t = Vec3::new(r.random_range(-0.15..0.15), r.random_range(-0.1..0.1), r.random_range(-0.05..0.05));
        p.set_pose(v, &CameraPose::new(axis_angle(&axis.normalize(), angle), t)?)?;
    }
    let stride = p.sh_stride();
    for _ in 0..primitives {
        let anchor = Anchor {
            view: r.random_range(0..num_context),
            pixel: [r.random_range(0.0..width as f64 - 1.0), r.random_range(0.0..height as f64 - 1.0)],
        };
        let quat = [r.random_range(0.3..1.0), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let log_scale = std::array::from_fn(|_| r.random_range(-3.5..-2.3));
        let sh: Vec<f64> = (0..stride).map(|_| r.random_range(-0.8..0.8)).collect();
        p.push(anchor, r.random_range(-1.5..1.5), quat, log_scale, r.random_range(-1.0..2.0), &sh)?;
    }
    let supervision = (0..p.num_views())
        .map(|v| {
            let phase: [f64; 3] = std::array::from_fn(|_| r.random_range(0.0..std::f64::consts::TAU));
            let img = Image::from_fn(width, height, |x, y| {
                let s = 0.31 * x as f64 + 0.17 * y as f64;
                std::array::from_fn(|c| 0.5 + 0.4 * (s * (c + 1) as f64 * 0.5 + phase[c]).sin())
            });
            (v, img)
        })
        .collect();
    Ok((p, supervision))
}
