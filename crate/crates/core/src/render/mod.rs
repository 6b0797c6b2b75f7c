//! Tile-based Gaussian splatting with an exact analytic backward pass.
//!
//! Primitives are projected with the EWA approximation, sorted globally
//! front-to-back by camera depth (ties by primitive index), binned into
//! square tiles, and composited per pixel. Tiles are independent, so the
//! forward pass is bit-identical for any thread count; the backward pass
//! accumulates into per-tile buffers that are merged in tile order.

mod backward;
mod scene;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{clamp_with_mask, sh_raw_color, GaussianSet};
use crate::geometry::{CameraIntrinsics, CameraPose, Mat3, Vec3};
use crate::image::{Image, ScalarImage};
use crate::par;

pub use backward::{render_backward_gaussians, SplatGradients};
pub(crate) use scene::prepare_view;
pub use scene::{render_backward, render_view, RenderGradients};

pub type Mat2 = Matrix2<f64>;

/// Rasterizer constants. Defaults follow common splatting practice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Footprint radius in standard deviations (Mahalanobis distance).
    pub sigma_cutoff: f64,
    /// Contributions `alpha * g` below this are skipped.
    pub min_weight: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Screen-space low-pass added to every 2D covariance, in px^2.
    pub blur: f64,
    /// Fraction of the image size a footprint may lie outside before culling.
    pub cull_margin: f64,
    /// Primitives with camera depth at or below this are culled.
    pub near_clip: f64,
    /// Floor on alpha when normalizing the expected depth.
    pub depth_eps: f64,
    /// Run tiles on the thread pool (ignored without the `parallel` feature).
    pub parallel: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            sigma_cutoff: 3.0,
            min_weight: 1.0 / 255.0,
            min_transmittance: 1e-4,
            blur: 0.3,
            cull_margin: 0.3,
            near_clip: 0.01,
            depth_eps: 1e-6,
            parallel: true,
        }
    }
}

impl RenderConfig {
    pub fn sequential() -> Self {
        Self {
            parallel: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    /// Transmittance-weighted expected depth, normalized by alpha.
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
}

/// Screen-space footprint of one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: [f64; 2],
    pub cov2d: Mat2,
    pub depth: f64,
}

/// Perspective Jacobian of `(f x / z + cx, f y / z + cy)` at a camera-frame point.
pub(crate) fn projection_jacobian(x: &Vec3, focal: f64) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    nalgebra::Matrix2x3::new(
        focal * iz,
        0.0,
        -focal * x.x * iz * iz,
        0.0,
        focal * iz,
        -focal * x.y * iz * iz,
    )
}

/// Projects a 3D Gaussian into a target camera; `None` when culled.
pub fn project_gaussian(
    center: &Vec3,
    cov3d: &Mat3,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    config: &RenderConfig,
) -> Option<SplatProjection> {
    let x = pose.to_view(center);
    if !(x.z > config.near_clip) {
        return None;
    }
    let f = intrinsics.focal();
    let (cx, cy) = intrinsics.principal_point();
    let w = pose.rotation.transpose();
    let j = projection_jacobian(&x, f);
    let cov2d = j * (w * cov3d * w.transpose()) * j.transpose() + Mat2::identity() * config.blur;
    let mean2d = [f * x.x / x.z + cx, f * x.y / x.z + cy];
    if !(cov2d.determinant() > 0.0) || !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (w_px, h_px) = (intrinsics.width() as f64, intrinsics.height() as f64);
    let rx = config.sigma_cutoff * cov2d[(0, 0)].sqrt();
    let ry = config.sigma_cutoff * cov2d[(1, 1)].sqrt();
    let (mx, my) = (config.cull_margin * w_px, config.cull_margin * h_px);
    if mean2d[0] + rx < -0.5 - mx
        || mean2d[0] - rx > w_px - 0.5 + mx
        || mean2d[1] + ry < -0.5 - my
        || mean2d[1] - ry > h_px - 0.5 + my
    {
        return None;
    }
    Some(SplatProjection {
        mean2d,
        cov2d,
        depth: x.z,
    })
}

/// Everything the compositor and the backward pass need about one primitive.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub mean: [f64; 2],
    pub cov2d: Mat2,
    pub conic: Mat2,
    pub depth: f64,
    pub x_view: Vec3,
    pub rgb: [f64; 3],
    pub rgb_active: [bool; 3],
    /// SH color before the clamp to [0, 1].
    pub rgb_raw: [f64; 3],
    pub opacity: f64,
    pub view_dir: Vec3,
    pub view_dist: f64,
    /// Inclusive pixel bounding box of the footprint, padded by one pixel.
    pub bbox: [usize; 4],
}

/// Saved forward state consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct RenderTape {
    pub(crate) intrinsics: CameraIntrinsics,
    pub(crate) pose: CameraPose,
    pub(crate) background: [f64; 3],
    pub(crate) config: RenderConfig,
    pub(crate) num_primitives: usize,
    pub(crate) splats: Vec<Option<Splat>>,
    /// Visible primitives, front to back.
    pub(crate) order: Vec<usize>,
    /// Per tile, the primitives whose footprint may touch it, front to back.
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
}

impl RenderTape {
    /// Visible primitives in compositing order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_primitives(&self) -> usize {
        self.num_primitives
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.splats.get(i).is_some_and(|s| s.is_some())
    }

    /// Screen-space projection of primitive `i`, if it was not culled.
    pub fn projection(&self, i: usize) -> Option<SplatProjection> {
        self.splats.get(i)?.as_ref().map(|s| SplatProjection {
            mean2d: s.mean,
            cov2d: s.cov2d,
            depth: s.depth,
        })
    }

    /// Inverse 2D covariance of primitive `i`.
    pub fn conic(&self, i: usize) -> Option<Mat2> {
        self.splats.get(i)?.as_ref().map(|s| s.conic)
    }

    /// Activated opacity and clamped color of primitive `i`.
    pub fn appearance(&self, i: usize) -> Option<(f64, [f64; 3])> {
        self.splats.get(i)?.as_ref().map(|s| (s.opacity, s.rgb))
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width()
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height()
    }

    /// Padded pixel bounding box `[x0, x1, y0, y1]` (inclusive) of primitive `i`.
    /// Pixels outside it never receive a contribution from `i`.
    pub(crate) fn footprint(&self, i: usize) -> Option<[usize; 4]> {
        self.splats.get(i)?.as_ref().map(|s| s.bbox)
    }

    /// Composites the single pixel `(x, y)` exactly as [`composite`] does.
    pub(crate) fn pixel(&self, x: usize, y: usize) -> PixelOut {
        let ts = self.config.tile_size;
        let list = &self.tiles[(y / ts) * self.tiles_x + x / ts];
        composite_pixel(x as f64, y as f64, list, &self.splats, &self.config, &self.background, |_| {})
    }

    pub(crate) fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` of tile `t`.
    pub(crate) fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        let ts = self.config.tile_size;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        (
            x0,
            (x0 + ts).min(self.width()),
            y0,
            (y0 + ts).min(self.height()),
        )
    }
}

/// One primitive's contribution to one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub index: usize,
    /// Position of the primitive in the tile list.
    pub slot: usize,
    /// `opacity * g`.
    pub a: f64,
    pub g: f64,
    /// Transmittance before this primitive.
    pub t: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PixelOut {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

/// Composites one pixel over `list`, reporting each accepted contribution.
#[inline]
pub(crate) fn composite_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    splats: &[Option<Splat>],
    config: &RenderConfig,
    background: &[f64; 3],
    mut visit: impl FnMut(Contribution),
) -> PixelOut {
    let cutoff2 = config.sigma_cutoff * config.sigma_cutoff;
    let mut t = 1.0f64;
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0f64;
    let mut dsum = 0.0f64;
    for (slot, &idx) in list.iter().enumerate() {
        let idx = idx as usize;
        let s = splats[idx].as_ref().expect("binned primitives are visible");
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let q = &s.conic;
        let m = q[(0, 0)] * dx * dx + (q[(0, 1)] + q[(1, 0)]) * dx * dy + q[(1, 1)] * dy * dy;
        if m > cutoff2 {
            continue;
        }
        let g = (-0.5 * m).exp();
        let a = s.opacity * g;
        if a < config.min_weight {
            continue;
        }
        let w = t * a;
        visit(Contribution {
            index: idx,
            slot,
            a,
            g,
            t,
            dx,
            dy,
        });
        acc[0] += w * s.rgb[0];
        acc[1] += w * s.rgb[1];
        acc[2] += w * s.rgb[2];
        wsum += w;
        dsum += w * s.depth;
        t *= 1.0 - a;
        if t < config.min_transmittance {
            break;
        }
    }
    let rest = 1.0 - wsum;
    PixelOut {
        color: [
            acc[0] + rest * background[0],
            acc[1] + rest * background[1],
            acc[2] + rest * background[2],
        ],
        alpha: wsum,
        depth: dsum / wsum.max(config.depth_eps),
    }
}

fn prepare_splat(
    set: &GaussianSet,
    i: usize,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    config: &RenderConfig,
) -> Result<Option<Splat>> {
    let cov3d = set.covariance(i)?;
    let center = &set.centers[i];
    let Some(p) = project_gaussian(center, &cov3d, intrinsics, pose, config) else {
        return Ok(None);
    };
    let conic = p
        .cov2d
        .try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("singular 2D covariance for primitive {i}")))?;
    let offset = center - pose.center();
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 { offset / view_dist } else { Vec3::z() };
    let rgb_raw = sh_raw_color(set.sh_of(i), set.sh_degree, &view_dir);
    let (rgb, rgb_active) = clamp_with_mask(rgb_raw);

    let rx = config.sigma_cutoff * p.cov2d[(0, 0)].sqrt();
    let ry = config.sigma_cutoff * p.cov2d[(1, 1)].sqrt();
    let (w, h) = (intrinsics.width() as f64, intrinsics.height() as f64);
    let x0 = ((p.mean2d[0] - rx).ceil() - 1.0).max(0.0);
    let x1 = ((p.mean2d[0] + rx).floor() + 1.0).min(w - 1.0);
    let y0 = ((p.mean2d[1] - ry).ceil() - 1.0).max(0.0);
    let y1 = ((p.mean2d[1] + ry).floor() + 1.0).min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return Ok(None);
    }
    Ok(Some(Splat {
        mean: p.mean2d,
        cov2d: p.cov2d,
        conic,
        depth: p.depth,
        x_view: pose.to_view(center),
        rgb,
        rgb_active,
        rgb_raw,
        opacity: set.opacity(i),
        view_dir,
        view_dist,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    }))
}

/// Projects, sorts and bins `set` for a camera without compositing.
pub fn prepare(
    set: &GaussianSet,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<RenderTape> {
    set.validate()?;
    if config.tile_size == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    let splats: Vec<Option<Splat>> =
        par::map_indexed(set.len(), config.parallel, |i| {
            prepare_splat(set, i, intrinsics, pose, config)
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..set.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            splats[a].as_ref().map_or(0.0, |s| s.depth),
            splats[b].as_ref().map_or(0.0, |s| s.depth),
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let ts = config.tile_size;
    let tiles_x = intrinsics.width().div_ceil(ts);
    let tiles_y = intrinsics.height().div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let [x0, x1, y0, y1] = splats[i].as_ref().expect("ordered primitives are visible").bbox;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    Ok(RenderTape {
        intrinsics: *intrinsics,
        pose: *pose,
        background,
        config: *config,
        num_primitives: set.len(),
        splats,
        order,
        tiles,
        tiles_x,
    })
}

/// Composites a prepared tape into color, depth and alpha images.
pub fn composite(tape: &RenderTape) -> RenderOutput {
    let (w, h) = (tape.width(), tape.height());
    let per_tile = par::map_indexed(tape.tile_count(), tape.config.parallel, |t| {
        let (x0, x1, y0, y1) = tape.tile_rect(t);
        let list = &tape.tiles[t];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                out.push(composite_pixel(
                    x as f64,
                    y as f64,
                    list,
                    &tape.splats,
                    &tape.config,
                    &tape.background,
                    |_| {},
                ));
            }
        }
        out
    });
    let mut color = Image::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha = ScalarImage::new(w, h);
    for (t, pixels) in per_tile.into_iter().enumerate() {
        let (x0, x1, y0, _) = tape.tile_rect(t);
        let tw = x1 - x0;
        for (k, p) in pixels.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            color.set_pixel(x, y, p.color);
            depth.set(x, y, p.depth);
            alpha.set(x, y, p.alpha);
        }
    }
    RenderOutput {
        color,
        depth,
        alpha,
    }
}

/// The non-smooth choices a render made: each pixel's contributor list in
/// blend order, and for every visible primitive the color channels that hit
/// the clamp (pinned to the clamped value) or stayed free (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStructure {
    pub contributors: Vec<Vec<u32>>,
    pub color_pins: Vec<[Option<f64>; 3]>,
}

/// Records the structure `tape` composites with.
pub fn pixel_structure(tape: &RenderTape) -> FrozenStructure {
    let (w, h) = (tape.width(), tape.height());
    let mut contributors = vec![Vec::new(); w * h];
    for t in 0..tape.tile_count() {
        let (x0, x1, y0, y1) = tape.tile_rect(t);
        for y in y0..y1 {
            for x in x0..x1 {
                let list = &mut contributors[y * w + x];
                composite_pixel(x as f64, y as f64, &tape.tiles[t], &tape.splats, &tape.config, &tape.background, |c| {
                    list.push(c.index as u32)
                });
            }
        }
    }
    let color_pins = tape
        .splats
        .iter()
        .map(|s| match s {
            Some(s) => std::array::from_fn(|c| (!s.rgb_active[c]).then_some(s.rgb[c])),
            None => [None; 3],
        })
        .collect();
    FrozenStructure { contributors, color_pins }
}

/// Composites `tape` with each pixel restricted to a fixed contributor list,
/// every threshold disabled and clamped color channels held at their pinned
/// values. Replaying a tape's own structure reproduces its color exactly;
/// replaying it on a nudged tape evaluates the same smooth piece of the image
/// function. `None` if a listed primitive was culled.
pub fn replay_structure(tape: &RenderTape, structure: &FrozenStructure) -> Option<Image> {
    let (w, h) = (tape.width(), tape.height());
    if structure.contributors.len() != w * h || structure.color_pins.len() != tape.splats.len() {
        return None;
    }
    let open = RenderConfig {
        sigma_cutoff: f64::INFINITY,
        min_weight: 0.0,
        min_transmittance: 0.0,
        ..tape.config
    };
    let splats: Vec<Option<Splat>> = tape
        .splats
        .iter()
        .zip(&structure.color_pins)
        .map(|(s, pins)| {
            s.as_ref().map(|s| {
                let mut s = s.clone();
                s.rgb = std::array::from_fn(|c| pins[c].unwrap_or(s.rgb_raw[c]));
                s
            })
        })
        .collect();
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let list = &structure.contributors[y * w + x];
            if list.iter().any(|&i| !tape.is_visible(i as usize)) {
                return None;
            }
            let p = composite_pixel(x as f64, y as f64, list, &splats, &open, &tape.background, |_| {});
            img.set_pixel(x, y, p.color);
        }
    }
    Some(img)
}

/// Renders `set` and keeps the forward state for [`render_backward_gaussians`].
pub fn render_with_tape(
    set: &GaussianSet,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<(RenderOutput, RenderTape)> {
    let tape = prepare(set, intrinsics, pose, background, config)?;
    Ok((composite(&tape), tape))
}

/// Renders `set` from a camera whose image size is taken from `intrinsics`.
pub fn render(
    set: &GaussianSet,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<RenderOutput> {
    render_with_tape(set, intrinsics, pose, background, config).map(|(out, _)| out)
}

/// Expected-depth channel only.
pub fn render_depth_only(
    set: &GaussianSet,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    config: &RenderConfig,
) -> Result<ScalarImage> {
    render(set, intrinsics, pose, [0.0; 3], config).map(|out| out.depth)
}
