use std::path::PathBuf;

use nas3r_core::geometry::{CameraPose, PoseRecord};
use nas3r_core::metrics::psnr;
use nas3r_core::render::{render, RenderConfig};
use nas3r_core::scene::load_sequence;

use crate::{CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// Sequence directory holding `gaussians.bin`.
    #[arg(long)]
    scene: PathBuf,
    /// Render from this stored camera and report PSNR against its frame.
    #[arg(long, conflicts_with = "pose", required_unless_present = "pose")]
    camera: Option<usize>,
    /// JSON file with one `{rotation, translation}` pose.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write the depth map as PFM next to the PNG.
    #[arg(long)]
    depth: bool,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
}

pub fn run(args: Args) -> CliResult {
    let seq = load_sequence(&args.scene)?;
    let (set, _) = seq
        .gaussians
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("{}: no gaussians.bin to render", args.scene.display())))?;
    let pose = match (args.camera, &args.pose) {
        (Some(i), _) => {
            let poses = seq
                .poses
                .as_ref()
                .ok_or_else(|| CliError::usage(format!("{}: no poses.json", args.scene.display())))?;
            *poses
                .get(i)
                .ok_or_else(|| CliError::usage(format!("camera {i} out of range: the sequence has {} frames", poses.len())))?
        }
        (None, Some(path)) => {
            let rec: PoseRecord = nas3r_core::json::read(path)?;
            CameraPose::try_from(&rec)?
        }
        (None, None) => unreachable!("clap requires one of --camera and --pose"),
    };
    let background = [args.background[0], args.background[1], args.background[2]];
    let out = render(set, &seq.camera()?, &pose, background, &RenderConfig::default())?;
    out.color.write_png(&args.out)?;
    if args.depth {
        out.depth.write_pfm(&args.out.with_extension("pfm"))?;
    }
    if let Some(i) = args.camera {
        println!("psnr vs frame {i}: {}", psnr(&out.color.quantized_u8(), &seq.images[i])?);
    }
    Ok(())
}
