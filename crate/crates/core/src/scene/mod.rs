//! Synthetic ground-truth scenes, view sampling and sequence I/O.

mod io;
mod sampling;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sh_coeff_count, GaussianSet, GaussianSidecar, MAX_SH_DEGREE, SH_C0};
use crate::geometry::{normalize_poses, project, CameraIntrinsics, CameraPose, IntrinsicsRecord, Mat3, Vec3};
use crate::image::{Image, ScalarImage};
use crate::render::{render, RenderConfig};
use crate::rng;

pub use io::{load_sequence, save_sequence, Sequence, FRAME_DIR, DEPTH_DIR};
pub use sampling::{curriculum_interval, sample_context_target, CurriculumSchedule, MultiViewSample, ScheduleShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    GaussianCloud,
    TexturedPlane,
    BoxRoom,
}

/// Camera path around the scene center (the origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Frames spread evenly over `span_deg` of a horizontal circle, facing the center.
    Arc {
        distance: f64,
        span_deg: f64,
        elevation_deg: f64,
    },
    /// Constant angular step around the vertical axis, facing the center.
    Orbit {
        distance: f64,
        step_deg: f64,
        elevation_deg: f64,
    },
    /// Pure sideways translation at fixed orientation.
    Line { distance: f64, length: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub primitives: usize,
    /// Half-size of the content around the origin, before normalization.
    pub extent: f64,
    pub texture_seed: u64,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Depth planes in normalized units (median first-view depth is 1).
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub sh_degree: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::GaussianCloud,
            primitives: 100,
            extent: 1.0,
            texture_seed: 0,
            trajectory: TrajectorySpec::Arc {
                distance: 4.0,
                span_deg: 20.0,
                elevation_deg: 5.0,
            },
            frames: 5,
            width: 64,
            height: 64,
            fov_deg: 60.0,
            near: 0.1,
            far: 10.0,
            sh_degree: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Argument(format!("a scene needs at least 2 frames, got {}", self.frames)));
        }
        if self.primitives == 0 || !(self.extent > 0.0) {
            return Err(Error::Argument("scene needs primitives and a positive extent".into()));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Argument(format!("SH degree {} above {MAX_SH_DEGREE}", self.sh_degree)));
        }
        let distance = match self.trajectory {
            TrajectorySpec::Arc { distance, .. }
            | TrajectorySpec::Orbit { distance, .. }
            | TrajectorySpec::Line { distance, .. } => distance,
        };
        if !(distance > 0.0) {
            return Err(Error::Argument("trajectory distance must be positive".into()));
        }
        CameraIntrinsics::from_degrees(self.fov_deg, self.width, self.height)?;
        crate::gaussian::activate_depth(0.0, self.near, self.far)?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_degrees(self.fov_deg, self.width, self.height)
    }
}

/// Ground truth for one synthetic sequence. Everything is expressed in the
/// first camera's frame and scaled so the median first-view primitive
/// depth is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub seed: u64,
    /// Rounded to f32 so the binary file reproduces it exactly.
    pub gaussians: GaussianSet,
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
    pub images: Vec<Image>,
    pub depths: Vec<ScalarImage>,
}

impl GeneratedScene {
    /// The on-disk view: 8-bit frames and 32-bit depths.
    pub fn to_sequence(&self) -> Sequence {
        Sequence {
            images: self.images.iter().map(Image::quantized_u8).collect(),
            poses: Some(self.poses.clone()),
            depths: Some(self.depths.iter().map(ScalarImage::quantized_f32).collect()),
            intrinsics: IntrinsicsRecord {
                fov_deg: self.spec.fov_deg,
                width: self.spec.width,
                height: self.spec.height,
            },
            gaussians: Some((
                self.gaussians.clone(),
                GaussianSidecar {
                    count: self.gaussians.len(),
                    sh_degree: self.gaussians.sh_degree,
                    near: self.spec.near,
                    far: self.spec.far,
                },
            )),
        }
    }
}

/// Camera at `eye` looking at `target`, image y pointing towards world +y.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Result<CameraPose> {
    let z = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Degenerate("camera eye coincides with its target".into()))?;
    let x = Vec3::y()
        .cross(&z)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Degenerate("viewing direction is vertical".into()))?;
    let y = z.cross(&x);
    CameraPose::new(Mat3::from_columns(&[x, y, z]), *eye)
}

fn trajectory(spec: &TrajectorySpec, frames: usize) -> Result<Vec<CameraPose>> {
    let circle = |theta: f64, elevation: f64, distance: f64| {
        let (st, ct) = theta.sin_cos();
        let (se, ce) = elevation.sin_cos();
        Vec3::new(st * ce, -se, -ct * ce) * distance
    };
    (0..frames)
        .map(|k| {
            let t = k as f64;
            match *spec {
                TrajectorySpec::Arc {
                    distance,
                    span_deg,
                    elevation_deg,
                } => {
                    let theta = (-0.5 * span_deg + span_deg * t / (frames - 1) as f64).to_radians();
                    look_at(&circle(theta, elevation_deg.to_radians(), distance), &Vec3::zeros())
                }
                TrajectorySpec::Orbit {
                    distance,
                    step_deg,
                    elevation_deg,
                } => look_at(
                    &circle((step_deg * t).to_radians(), elevation_deg.to_radians(), distance),
                    &Vec3::zeros(),
                ),
                TrajectorySpec::Line { distance, length } => Ok(CameraPose {
                    rotation: Mat3::identity(),
                    translation: Vec3::new(-0.5 * length + length * t / (frames - 1) as f64, 0.0, -distance),
                }),
            }
        })
        .collect()
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Smooth color field from a few random sinusoids.
struct Texture {
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "texture");
        let waves = (0..4)
            .map(|_| {
                let freq = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = [rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)];
                (freq, phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = [0.5; 3];
        for (f, p, a) in &self.waves {
            let s = (f[0] * u + f[1] * v + p).sin();
            for k in 0..3 {
                c[k] += a[k] * s;
            }
        }
        c.map(|x| x.clamp(0.05, 0.95))
    }
}

fn push_primitive(set: &mut GaussianSet, center: Vec3, quat: [f64; 4], scale: [f64; 3], logit: f64, rgb: [f64; 3], rng: &mut ChaCha8Rng) {
    let k = sh_coeff_count(set.sh_degree);
    let mut sh = vec![0.0; k * 3];
    for c in 0..3 {
        sh[c] = (rgb[c] - 0.5) / SH_C0;
    }
    for v in sh.iter_mut().skip(3) {
        *v = rng.random_range(-0.1..0.1);
    }
    set.push(center, quat, scale.map(f64::ln), logit, &sh);
}

const PLANE_TILT_DEG: f64 = 40.0;

fn build_content(spec: &SceneSpec, seed: u64) -> GaussianSet {
    let mut rng = rng::stream(seed, "primitives");
    let tex = Texture::new(spec.texture_seed);
    let e = spec.extent;
    let n = spec.primitives;
    let mut set = GaussianSet::empty(spec.sh_degree);
    match spec.kind {
        SceneKind::GaussianCloud => {
            for _ in 0..n {
                let c = loop {
                    let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    if p.norm() <= 1.0 {
                        break p * e;
                    }
                };
                let scale = std::array::from_fn(|_| e * rng.random_range(0.04..0.12));
                let rgb = std::array::from_fn(|_| rng.random_range(0.1..0.9));
                let q = random_unit_quat(&mut rng);
                let logit = rng.random_range(0.5..3.0);
                push_primitive(&mut set, c, q, scale, logit, rgb, &mut rng);
            }
        }
        SceneKind::TexturedPlane => {
            // Tilted away from the cameras so depth varies across the image.
            let tilt = PLANE_TILT_DEG.to_radians();
            let quat = [(0.5 * tilt).cos(), (0.5 * tilt).sin(), 0.0, 0.0];
            let side = (n as f64).sqrt().ceil() as usize;
            let cell = 2.0 * e / side as f64;
            for i in 0..n {
                let (gx, gy) = ((i % side) as f64, (i / side) as f64);
                let u = -e + (gx + 0.5) * cell;
                let v = -e + (gy + 0.5) * cell;
                let c = Vec3::new(u, v * tilt.cos(), v * tilt.sin());
                let scale = [0.6 * cell, 0.6 * cell, 0.01 * e];
                let rgb = tex.color(u / e, v / e);
                push_primitive(&mut set, c, quat, scale, 3.0, rgb, &mut rng);
            }
        }
        SceneKind::BoxRoom => {
            // Back wall, floor, ceiling and side walls of an open-fronted box.
            let thin = 0.01 * e;
            let size = 2.0 * e / (n as f64 / 5.0).sqrt();
            for i in 0..n {
                let face = i % 5;
                let (a, b) = (rng.random_range(-e..e), rng.random_range(-e..e));
                let (c, scale, tint) = match face {
                    0 => (Vec3::new(a, b, e), [size, size, thin], [1.0, 1.0, 1.0]),
                    1 => (Vec3::new(a, e, b), [size, thin, size], [1.0, 0.8, 0.6]),
                    2 => (Vec3::new(a, -e, b), [size, thin, size], [0.7, 0.8, 1.0]),
                    3 => (Vec3::new(-e, a, b), [thin, size, size], [1.0, 0.7, 0.7]),
                    _ => (Vec3::new(e, a, b), [thin, size, size], [0.7, 1.0, 0.7]),
                };
                let base = tex.color(a / e + face as f64, b / e);
                let rgb = std::array::from_fn(|k| (base[k] * tint[k]).clamp(0.05, 0.95));
                push_primitive(&mut set, c, [1.0, 0.0, 0.0, 0.0], scale.map(|s| s * 0.5), 2.5, rgb, &mut rng);
            }
        }
    }
    set
}

fn coverage(set: &GaussianSet, k: &CameraIntrinsics, pose: &CameraPose) -> f64 {
    let (w, h) = (k.width() as f64, k.height() as f64);
    let inside = set
        .centers
        .iter()
        .filter(|c| {
            project(c, k, pose).visible().is_some_and(|((u, v), _)| {
                (-0.5..w - 0.5).contains(&u) && (-0.5..h - 0.5).contains(&v)
            })
        })
        .count();
    inside as f64 / set.len() as f64
}

/// Minimum fraction of primitives every frame must see.
pub const MIN_COVERAGE: f64 = 0.5;

/// Builds the scene, renders every frame and checks frustum coverage.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<GeneratedScene> {
    spec.validate()?;
    let world = build_content(spec, seed);
    let world_poses = trajectory(&spec.trajectory, spec.frames)?;
    let first = world_poses[0];
    let canon = world.transformed(&first.inverse());
    let mut poses = normalize_poses(&world_poses)?;

    let mut depths: Vec<f64> = canon.centers.iter().map(|c| c.z).filter(|z| *z > 0.0).collect();
    if depths.is_empty() {
        return Err(Error::Generation("no primitive lies in front of the first camera".into()));
    }
    depths.sort_by(f64::total_cmp);
    let m = depths[depths.len() / 2];
    let mut gaussians = canon;
    for c in gaussians.centers.iter_mut() {
        *c /= m;
    }
    for s in gaussians.log_scales.iter_mut() {
        for v in s.iter_mut() {
            *v -= m.ln();
        }
    }
    let gaussians = gaussians.quantized_f32();
    for p in poses.iter_mut() {
        p.translation /= m;
    }

    let intrinsics = spec.intrinsics()?;
    for (f, pose) in poses.iter().enumerate() {
        let cov = coverage(&gaussians, &intrinsics, pose);
        if cov < MIN_COVERAGE {
            return Err(Error::Generation(format!(
                "frame {f} sees only {:.1}% of the primitives (need {:.0}%)",
                cov * 100.0,
                MIN_COVERAGE * 100.0
            )));
        }
    }
    let cfg = RenderConfig::default();
    let mut images = Vec::with_capacity(poses.len());
    let mut depth_maps = Vec::with_capacity(poses.len());
    for pose in &poses {
        let out = render(&gaussians, &intrinsics, pose, [0.0; 3], &cfg)?;
        images.push(out.color);
        depth_maps.push(out.depth);
    }
    Ok(GeneratedScene {
        spec: spec.clone(),
        seed,
        gaussians,
        poses,
        intrinsics,
        images,
        depths: depth_maps,
    })
}

/// The ten scenes the acceptance suite and the CLI ship with.
pub fn shipped_scenes() -> Vec<(&'static str, SceneSpec, u64)> {
    let base = SceneSpec {
        width: 64,
        height: 64,
        fov_deg: 90.0,
        near: 0.2,
        far: 4.0,
        frames: 5,
        ..SceneSpec::default()
    };
    let arc = |span: f64, elev: f64| TrajectorySpec::Arc {
        distance: 2.0,
        span_deg: span,
        elevation_deg: elev,
    };
    let orbit = |step: f64| TrajectorySpec::Orbit {
        distance: 2.0,
        step_deg: step,
        elevation_deg: 10.0,
    };
    let cloud = |n: usize, trajectory: TrajectorySpec| SceneSpec {
        kind: SceneKind::GaussianCloud,
        primitives: n,
        trajectory,
        ..base.clone()
    };
    let plane = |n: usize, tex: u64, trajectory: TrajectorySpec| SceneSpec {
        kind: SceneKind::TexturedPlane,
        primitives: n,
        texture_seed: tex,
        trajectory,
        ..base.clone()
    };
    let room = |n: usize, tex: u64, trajectory: TrajectorySpec| SceneSpec {
        kind: SceneKind::BoxRoom,
        primitives: n,
        texture_seed: tex,
        trajectory,
        ..base.clone()
    };
    vec![
        ("cloud-arc", cloud(150, arc(20.0, 5.0)), 11),
        ("cloud-orbit", cloud(200, orbit(6.0)), 12),
        ("cloud-line", cloud(180, TrajectorySpec::Line { distance: 2.0, length: 0.64 }), 13),
        ("cloud-dense", cloud(300, arc(16.0, -8.0)), 14),
        ("plane-arc", plane(256, 1, arc(24.0, 6.0)), 21),
        ("plane-line", plane(225, 2, TrajectorySpec::Line { distance: 2.0, length: 0.64 }), 22),
        ("plane-orbit", plane(256, 3, orbit(5.0)), 23),
        ("room-arc", room(300, 4, TrajectorySpec::Arc { distance: 1.76, span_deg: 18.0, elevation_deg: 4.0 }), 31),
        ("room-line", room(300, 5, TrajectorySpec::Line { distance: 1.76, length: 0.48 }), 32),
        ("room-orbit", room(300, 6, TrajectorySpec::Orbit { distance: 1.92, step_deg: 4.0, elevation_deg: 6.0 }), 33),
    ]
}
