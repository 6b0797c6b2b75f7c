use std::path::{Path, PathBuf};

use nas3r_core::ba::{
    history_csv, init_scene_parameters, optimize_with_observer, supervision_pairs, BAConfig, FovInit, GroundTruth,
};
use nas3r_core::gaussian::{DEFAULT_FAR, DEFAULT_NEAR};
use nas3r_core::geometry::{axis_angle, normalize_poses, pose_angular_errors, CameraPose, Vec3};
use nas3r_core::image::{Image, ScalarImage};
use nas3r_core::metrics::{depth_metrics, mse, DepthMetrics, Psnr};
use nas3r_core::params::{parse_class_list, SceneParameters};
use nas3r_core::render::render_view;
use nas3r_core::rng;
use nas3r_core::scene::{load_sequence, Sequence};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{config, manifest, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// Sequence directory; overrides the config's `scene`.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output directory for the history, parameters and report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set ba.lr=1e-3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Comma-separated parameter classes to hold fixed (`pose` means both pose classes).
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// One primitive per context pixel at flat depth, identity poses.
    PixelAligned,
    /// The sequence's own Gaussians and poses, optionally perturbed.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FovInitMode {
    FullImage,
    Known,
}

/// Applied to every non-canonical view of a ground-truth init.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    /// Rotation about a random axis.
    pub rot_deg: f64,
    /// Translation offset in a random direction, in scene units.
    pub trans: f64,
    pub fov_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaExperiment {
    pub version: u32,
    pub seed: u64,
    pub scene: Option<PathBuf>,
    pub context: Vec<usize>,
    /// Target frames; empty means the last frame.
    pub targets: Vec<usize>,
    pub init: InitMode,
    pub fov_init: FovInitMode,
    /// Depth range; defaults to the sequence's recorded range.
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub sh_degree: usize,
    pub perturb: Perturbation,
    /// Write renders of the supervised views every this many steps.
    pub snapshot_every: Option<usize>,
    pub thresholds: Vec<f64>,
    pub ba: BAConfig,
}

impl Default for BaExperiment {
    fn default() -> Self {
        Self {
            version: config::CONFIG_VERSION,
            seed: 0,
            scene: None,
            context: vec![0],
            targets: Vec::new(),
            init: InitMode::PixelAligned,
            fov_init: FovInitMode::FullImage,
            near: None,
            far: None,
            sh_degree: 0,
            perturb: Perturbation::default(),
            snapshot_every: None,
            thresholds: vec![5.0, 10.0, 20.0],
            ba: BAConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct Report {
    version: u32,
    seed: u64,
    steps: usize,
    converged: bool,
    initial_loss: f64,
    best_loss: f64,
    psnr: Psnr,
    fov_init_rad: f64,
    fov_rad: f64,
    fov_deg: f64,
    rot_err_deg: Option<f64>,
    trans_err_deg: Option<f64>,
    depth: Option<DepthMetrics>,
}

fn check_frames(seq: &Sequence, frames: &[usize], what: &str) -> CliResult {
    if let Some(&bad) = frames.iter().find(|&&i| i >= seq.len()) {
        return Err(CliError::usage(format!("{what} frame {bad} out of range: the sequence has {} frames", seq.len())));
    }
    Ok(())
}

fn unit(r: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn ground_truth_init(seq: &Sequence, cfg: &BaExperiment, views: &[usize], near: f64, far: f64) -> CliResult<SceneParameters> {
    let (Some((set, _)), Some(poses)) = (&seq.gaussians, &seq.poses) else {
        return Err(CliError::usage("ground-truth init needs gaussians.bin and poses.json"));
    };
    let anchor = poses[views[0]];
    let set = set.transformed(&anchor.inverse());
    let chosen: Vec<CameraPose> = views.iter().map(|&i| poses[i]).collect();
    let normalized = normalize_poses(&chosen)?;
    let mut p = SceneParameters::from_gaussians(&set, &seq.camera()?, &normalized, cfg.context.len(), near, far)?;
    let mut r = rng::stream(cfg.seed, "perturb");
    let Perturbation { rot_deg, trans, fov_deg } = cfg.perturb;
    for (v, pose) in normalized.iter().enumerate().skip(1) {
        let (axis, dir) = (unit(&mut r), unit(&mut r));
        if rot_deg != 0.0 || trans != 0.0 {
            let moved = CameraPose::new(pose.rotation * axis_angle(&axis, rot_deg.to_radians()), pose.translation + dir * trans)?;
            p.set_pose(v, &moved)?;
        }
    }
    p.fov_rad += fov_deg.to_radians();
    Ok(p)
}

fn write_snapshots(dir: &Path, step: usize, p: &SceneParameters, cfg: &BaExperiment, views: &[usize]) -> nas3r_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| nas3r_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let span = p.far - p.near;
    for &v in views {
        let (out, _) = render_view(p, v, cfg.ba.background, &cfg.ba.render)?;
        out.color.write_png(&dir.join(format!("step{step:06}_view{v}.png")))?;
        let depth = Image::from_fn(p.width, p.height, |x, y| {
            let a = out.alpha.get(x, y);
            let d = if a > 0.0 { 1.0 - (out.depth.get(x, y) - p.near) / span } else { 0.0 };
            [d.clamp(0.0, 1.0); 3]
        });
        depth.write_png(&dir.join(format!("step{step:06}_view{v}_depth.png")))?;
    }
    Ok(())
}

pub fn run(args: Args) -> CliResult {
    let mut cfg: BaExperiment = config::load(&BaExperiment::default(), args.config.as_deref(), &args.sets)?;
    config::check_version(cfg.version)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(scene) = args.scene {
        cfg.scene = Some(scene);
    }
    if let Some(list) = &args.freeze {
        for class in parse_class_list(list)? {
            if !cfg.ba.freeze.contains(&class) {
                cfg.ba.freeze.push(class);
            }
        }
    }
    let scene_dir = cfg.scene.clone().ok_or_else(|| CliError::usage("no scene given (--scene or `scene` in the config)"))?;
    if !scene_dir.is_dir() {
        return Err(CliError::usage(format!("{}: not a directory", scene_dir.display())));
    }
    let seq = load_sequence(&scene_dir)?;
    if cfg.targets.is_empty() {
        cfg.targets.push(seq.len() - 1);
    }
    if cfg.context.is_empty() {
        return Err(CliError::usage("at least one context frame is required"));
    }
    check_frames(&seq, &cfg.context, "context")?;
    check_frames(&seq, &cfg.targets, "target")?;
    let views: Vec<usize> = cfg.context.iter().chain(&cfg.targets).copied().collect();
    let recorded = seq.gaussians.as_ref().map(|(_, side)| (side.near, side.far));
    let near = cfg.near.or(recorded.map(|r| r.0)).unwrap_or(DEFAULT_NEAR);
    let far = cfg.far.or(recorded.map(|r| r.1)).unwrap_or(DEFAULT_FAR);

    let context_images: Vec<Image> = cfg.context.iter().map(|&i| seq.images[i].clone()).collect();
    let target_images: Vec<Image> = cfg.targets.iter().map(|&i| seq.images[i].clone()).collect();
    let init = match cfg.init {
        InitMode::PixelAligned => {
            let fov = match cfg.fov_init {
                FovInitMode::FullImage => FovInit::FullImage,
                FovInitMode::Known => FovInit::Known(seq.camera()?.fov_rad()),
            };
            let mut p = init_scene_parameters(&context_images, target_images.len(), fov, near, far, cfg.sh_degree)?;
            p.fov_rad += cfg.perturb.fov_deg.to_radians();
            p
        }
        InitMode::GroundTruth => ground_truth_init(&seq, &cfg, &views, near, far)?,
    };
    let supervision = supervision_pairs(&context_images, &target_images, cfg.ba.supervise_context);
    let gt = GroundTruth {
        poses: seq.poses.as_ref().map(|p| views.iter().map(|&i| p[i]).collect()),
    };

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::usage(format!("{}: {e}", args.out.display())))?;
    let snapshot_dir = args.out.join("snapshots");
    let supervised: Vec<usize> = supervision.iter().map(|(v, _)| *v).collect();
    let mut snapshot_err = None;
    let fov_init_rad = init.fov_rad;
    let result = optimize_with_observer(init, &supervision, &cfg.ba, &gt, |step, p| {
        if let Some(every) = cfg.snapshot_every.filter(|&n| n > 0) {
            if step % every == 0 && snapshot_err.is_none() {
                snapshot_err = write_snapshots(&snapshot_dir, step, p, &cfg, &supervised).err();
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }

    let mut total = 0.0;
    for (v, im) in &supervision {
        total += mse(&render_view(&result.params, *v, cfg.ba.background, &cfg.ba.render)?.0.color, im)?;
    }
    let (mut rot, mut trans) = (None, None);
    if let Some(gt_poses) = &gt.poses {
        let gt_norm = normalize_poses(gt_poses)?;
        let pred = result.params.decoded_poses()?;
        for v in 1..pred.len() {
            let (r, t) = pose_angular_errors(&pred[v], &gt_norm[v]);
            rot = Some(rot.unwrap_or(0.0f64).max(r));
            trans = Some(trans.unwrap_or(0.0f64).max(t));
        }
    }
    let depth = match &seq.depths {
        Some(depths) => {
            let gt_depth: &ScalarImage = &depths[cfg.context[0]];
            let (out, _) = render_view(&result.params, 0, cfg.ba.background, &cfg.ba.render)?;
            let mask: Vec<bool> = gt_depth
                .data()
                .iter()
                .zip(out.alpha.data())
                .map(|(&d, &a)| d.is_finite() && d > 0.0 && a > 0.5)
                .collect();
            mask.iter().any(|&m| m).then(|| depth_metrics(&out.depth, gt_depth, Some(&mask), true)).transpose()?
        }
        None => None,
    };
    let report = Report {
        version: config::CONFIG_VERSION,
        seed: cfg.seed,
        steps: result.steps,
        converged: result.converged,
        initial_loss: result.history[0].loss,
        best_loss: result.best_loss,
        psnr: Psnr::from_mse(total / supervision.len() as f64),
        fov_init_rad,
        fov_rad: result.params.fov_rad,
        fov_deg: result.params.fov_rad.to_degrees(),
        rot_err_deg: rot,
        trans_err_deg: trans,
        depth,
    };

    let history_path = args.out.join("history.csv");
    std::fs::write(&history_path, history_csv(&result.history)).map_err(|e| CliError::usage(format!("{}: {e}", history_path.display())))?;
    nas3r_core::json::write_pretty(&result.params, &args.out.join("params.json"))?;
    nas3r_core::json::write_pretty(&report, &args.out.join("eval.json"))?;
    manifest::write(&args.out, "ba", cfg.seed, &cfg, !args.no_timestamp)?;
    println!(
        "steps {} converged {} loss {:.6e} -> {:.6e} psnr {} fov {:.4} deg",
        report.steps, report.converged, report.initial_loss, report.best_loss, report.psnr, report.fov_deg
    );
    Ok(())
}
