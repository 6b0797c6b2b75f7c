use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use nas3r_core::geometry::{normalize_poses, pose_angular_errors};
use nas3r_core::metrics::{depth_metrics, mse, pose_auc, ssim, PoseErrorSample, Psnr};
use nas3r_core::scene::load_sequence;
use serde::Serialize;

use crate::{config, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// Predicted sequence directory.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth sequence directory.
    #[arg(long)]
    gt: PathBuf,
    /// AUC thresholds in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 20.0])]
    thresholds: Vec<f64>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-frame pose errors as CSV.
    #[arg(long)]
    errors_csv: Option<PathBuf>,
    /// Compare depth without median scale alignment.
    #[arg(long)]
    no_align: bool,
}

/// Every field is always present; metrics whose inputs are missing are null.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub version: u32,
    pub frames: usize,
    pub psnr: Psnr,
    pub ssim: f64,
    pub auc: Option<BTreeMap<String, f64>>,
    pub rel: Option<f64>,
    pub tau: Option<f64>,
    /// Needs a pretrained network; never substituted.
    pub lpips: Option<f64>,
}

fn threshold_key(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        t.to_string()
    }
}

pub fn run(args: Args) -> CliResult {
    let pred = load_sequence(&args.pred)?;
    let gt = load_sequence(&args.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::usage(format!("{} predicted frames but {} ground-truth frames", pred.len(), gt.len())));
    }
    if pred.images[0].dims() != gt.images[0].dims() {
        return Err(CliError::usage("predicted and ground-truth frames differ in size"));
    }
    let n = gt.len();
    let mut total_mse = 0.0;
    let mut total_ssim = 0.0;
    for (p, g) in pred.images.iter().zip(&gt.images) {
        total_mse += mse(p, g)?;
        total_ssim += ssim(p, g)?;
    }

    let mut csv = String::from("frame,rot_err_deg,trans_err_deg,max_err_deg\n");
    let auc = match (&pred.poses, &gt.poses) {
        (Some(pp), Some(gp)) if n > 1 => {
            let (pp, gp) = (normalize_poses(pp)?, normalize_poses(gp)?);
            let samples: Vec<PoseErrorSample> = (1..n)
                .map(|i| {
                    let (r, t) = pose_angular_errors(&pp[i], &gp[i]);
                    let _ = writeln!(csv, "{i},{r},{t},{}", r.max(t));
                    PoseErrorSample::new(r, t)
                })
                .collect();
            let values = pose_auc(&samples, &args.thresholds)?;
            Some(args.thresholds.iter().map(|&t| threshold_key(t)).zip(values).collect())
        }
        _ => None,
    };
    let (rel, tau) = match (&pred.depths, &gt.depths) {
        (Some(pd), Some(gd)) => {
            let (mut rel, mut tau) = (0.0, 0.0);
            for (p, g) in pd.iter().zip(gd) {
                let mask: Vec<bool> = g.data().iter().map(|&d| d.is_finite() && d > 0.0).collect();
                let m = depth_metrics(p, g, Some(&mask), !args.no_align)?;
                rel += m.rel;
                tau += m.tau;
            }
            (Some(rel / n as f64), Some(tau / n as f64))
        }
        _ => (None, None),
    };
    let report = EvalReport {
        version: config::CONFIG_VERSION,
        frames: n,
        psnr: Psnr::from_mse(total_mse / n as f64),
        ssim: total_ssim / n as f64,
        auc,
        rel,
        tau,
        lpips: None,
    };
    if let Some(path) = &args.errors_csv {
        std::fs::write(path, &csv).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    match &args.out {
        Some(path) => nas3r_core::json::write_pretty(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}
