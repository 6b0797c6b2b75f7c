//! `nas3r`: scene synthesis, rendering, photometric bundle adjustment,
//! evaluation and gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or I/O error,
//! 3 numerical divergence.

mod ba;
mod config;
mod eval;
mod gradcheck;
mod manifest;
mod render;
mod synth;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nas3r_core::scene::{curriculum_interval, CurriculumSchedule, ScheduleShape};

pub const THREADS_ENV: &str = "NAS3R_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<nas3r_core::Error> for CliError {
    fn from(e: nas3r_core::Error) -> Self {
        let code = match e {
            nas3r_core::Error::Divergence { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "nas3r", version, about = "Gaussian splatting with photometric bundle adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground truth.
    Synth(synth::Args),
    /// Render a stored scene from one of its cameras or a pose file.
    Render(render::Args),
    /// Recover cameras, intrinsics and depth by photometric bundle adjustment.
    Ba(ba::Args),
    /// Compare a predicted sequence against ground truth.
    Eval(eval::Args),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(gradcheck::Args),
    /// Print the frame-interval curriculum.
    Curriculum(CurriculumArgs),
}

#[derive(clap::Args)]
struct CurriculumArgs {
    #[arg(long, default_value_t = 25)]
    start: usize,
    #[arg(long, default_value_t = 45)]
    end: usize,
    #[arg(long, default_value_t = 100_000)]
    ramp: usize,
    #[arg(long, value_enum, default_value_t = Shape::Linear)]
    shape: Shape,
    /// Row spacing in steps; defaults to a tenth of the ramp.
    #[arg(long)]
    every: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Shape {
    Linear,
    Staircase,
}

fn curriculum(args: &CurriculumArgs) -> CliResult {
    let schedule = CurriculumSchedule {
        start: args.start,
        end: args.end,
        ramp_steps: args.ramp,
        shape: match args.shape {
            Shape::Linear => ScheduleShape::Linear,
            Shape::Staircase => ScheduleShape::Staircase,
        },
    };
    schedule.validate()?;
    let every = args.every.unwrap_or((args.ramp / 10).max(1));
    if every == 0 {
        return Err(CliError::usage("--every must be positive"));
    }
    println!("step\tinterval");
    let mut step = 0;
    loop {
        println!("{step}\t{}", curriculum_interval(step, &schedule)?);
        if step >= args.ramp {
            break;
        }
        step = (step + every).min(args.ramp);
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Render(a) => render::run(a),
        Command::Ba(a) => ba::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Curriculum(a) => curriculum(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
