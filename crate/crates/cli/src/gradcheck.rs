use std::time::Instant;

use nas3r_core::ba::BAConfig;
use nas3r_core::gradcheck::{gradcheck, random_scene, GradcheckConfig};
use nas3r_core::params::{parse_class_list, ParamClass};

use crate::{CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random scenes; scene k uses seed `seed + k`.
    #[arg(long, default_value_t = 20)]
    scenes: u64,
    /// Image width and height.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    primitives: usize,
    #[arg(long, default_value_t = 2)]
    context: usize,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
    /// Comma-separated classes to check (default: all).
    #[arg(long)]
    classes: Option<String>,
    /// Check a random subset of this many entries per class and scene.
    #[arg(long)]
    max_entries: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    /// Test hook: perturb the analytic gradient of one class.
    #[arg(long, hide = true)]
    corrupt: Option<ParamClass>,
}

#[derive(Default)]
struct Totals {
    checked: usize,
    kinks: usize,
    failures: usize,
    max_abs_err: f64,
}

pub fn run(args: Args) -> CliResult {
    let classes = match &args.classes {
        Some(list) => parse_class_list(list)?,
        None => ParamClass::ALL.to_vec(),
    };
    if args.scenes == 0 {
        return Err(CliError::usage("--scenes must be positive"));
    }
    let ba = BAConfig {
        background: [0.1, 0.2, 0.3],
        ..BAConfig::default()
    };
    let start = Instant::now();
    let mut totals: Vec<Totals> = classes.iter().map(|_| Totals::default()).collect();
    for k in 0..args.scenes {
        let seed = args.seed + k;
        let (params, supervision) = random_scene(seed, args.primitives, args.size, args.size, args.context, args.sh_degree)?;
        let cfg = GradcheckConfig {
            h: args.h,
            rel_tol: args.rel_tol,
            max_entries: args.max_entries,
            seed,
            corrupt: args.corrupt,
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&params, &supervision, &ba, &classes, &cfg)?;
        for (t, c) in totals.iter_mut().zip(&report.classes) {
            t.checked += c.checked;
            t.kinks += c.kinks;
            t.failures += c.failures;
            t.max_abs_err = t.max_abs_err.max(c.max_abs_err);
        }
    }
    println!("{:<14}{:>9}{:>7}{:>10}{:>14}  result", "class", "checked", "kinks", "failures", "max_abs_err");
    let mut failed = Vec::new();
    for (class, t) in classes.iter().zip(&totals) {
        let ok = t.failures == 0;
        if !ok {
            failed.push(class.name());
        }
        println!(
            "{:<14}{:>9}{:>7}{:>10}{:>14.3e}  {}",
            class.name(),
            t.checked,
            t.kinks,
            t.failures,
            t.max_abs_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!("{} scenes in {:.1}s", args.scenes, start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
