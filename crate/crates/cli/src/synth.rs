use std::path::PathBuf;

use nas3r_core::scene::{generate_scene, save_sequence, shipped_scenes, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::{config, manifest, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// Output sequence directory.
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    /// Start from one of the shipped scenes instead of the default spec.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set scene.frames=8`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// List the shipped scene names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub version: u32,
    pub seed: u64,
    pub scene: SceneSpec,
}

pub fn run(args: Args) -> CliResult {
    let shipped = shipped_scenes();
    if args.list {
        for (name, _, seed) in &shipped {
            println!("{name}\tseed {seed}");
        }
        return Ok(());
    }
    let defaults = match &args.scene {
        Some(name) => {
            let (_, spec, seed) = shipped
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| CliError::usage(format!("unknown scene `{name}` (see --list)")))?;
            SynthConfig {
                version: config::CONFIG_VERSION,
                seed: *seed,
                scene: spec.clone(),
            }
        }
        None => SynthConfig {
            version: config::CONFIG_VERSION,
            seed: 0,
            scene: SceneSpec::default(),
        },
    };
    let mut cfg: SynthConfig = config::load(&defaults, args.config.as_deref(), &args.sets)?;
    config::check_version(cfg.version)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.as_deref().expect("clap requires --out without --list");
    let scene = generate_scene(&cfg.scene, cfg.seed)?;
    save_sequence(&scene.to_sequence(), out)?;
    manifest::write(out, "synth", cfg.seed, &cfg, !args.no_timestamp)?;
    println!("wrote {} frames to {}", cfg.scene.frames, out.display());
    Ok(())
}
