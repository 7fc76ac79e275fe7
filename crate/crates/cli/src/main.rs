use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perturb::harness::{self, CacheOptions, RunOptions};
use perturb::{Error, SceneConfig, SolverTag};

#[derive(Parser)]
#[command(
    name = "perturb",
    version,
    about = "Implicit FEM time stepping with perturbation-subspace local solves"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// Scene description (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Output directory; overrides the scene's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Cubature sampling seed; overrides the scene's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Always recompute bases and cubature, and do not store them.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Build (or load) bases and cubature for the scene.
    Precompute {
        #[command(flatten)]
        common: Common,
    },
    /// Step the scene and write frames and metrics.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// newton, jgs2_exact, jgs2_cubature or plain_local.
        #[arg(long)]
        solver: Option<SolverTag>,
    },
    /// Measure solvers against a Newton reference; writes errors.csv and iterations.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Solvers to compare (repeat or comma-separate); all by default.
        #[arg(long, value_delimiter = ',')]
        solver: Vec<SolverTag>,
    },
    /// Run the invariant checks on the scene.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solver: Option<SolverTag>,
    },
}

enum Outcome {
    Ok,
    NotConverged,
}

fn options(common: &Common, solver: Option<SolverTag>) -> RunOptions {
    RunOptions {
        solver,
        output: common.out.clone(),
        seed: common.seed,
        cache: if common.no_cache {
            CacheOptions::disabled()
        } else {
            CacheOptions::from_env()
        },
        write_files: true,
    }
}

fn load(common: &Common) -> perturb::Result<SceneConfig> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    harness::parse_scene(&common.scene)
}

fn execute(verb: Verb) -> perturb::Result<Outcome> {
    match verb {
        Verb::Precompute { common } => {
            let scene = load(&common)?;
            let (model, _) = scene.build_model()?;
            let opts = options(&common, None);
            let seed = common.seed.unwrap_or(scene.seed);
            let (pre, cached) =
                harness::load_or_precompute(&model, scene.h, &scene.cubature, seed, &opts.cache)?;
            println!(
                "{} vertices, {} from cache, {:.1}% of cubature fits met the residual target",
                model.vertex_count(),
                if cached { "loaded" } else { "not" },
                100.0 * pre.converged_fraction()
            );
            Ok(Outcome::Ok)
        }
        Verb::Run { common, solver } => {
            let scene = load(&common)?;
            let report = harness::run(&scene, &options(&common, solver))?;
            let iters: Vec<usize> = (0..report.frames_completed)
                .map(|f| report.rows.iter().filter(|r| r.frame == f).count())
                .collect();
            let mean = iters.iter().sum::<usize>() as f64 / iters.len().max(1) as f64;
            println!(
                "{}: {} of {} frames, {:.1} iterations per frame (max {}), output in {}",
                report.solver,
                report.frames_completed,
                scene.frames,
                mean,
                iters.iter().max().unwrap_or(&0),
                report.output.display()
            );
            if report.min_distance.is_finite() {
                println!("smallest contact distance: {:e}", report.min_distance);
            }
            Ok(if report.converged {
                Outcome::Ok
            } else {
                Outcome::NotConverged
            })
        }
        Verb::Compare { common, solver } => {
            let scene = load(&common)?;
            let tags = if solver.is_empty() {
                SolverTag::ALL.to_vec()
            } else {
                solver
            };
            let report = match harness::compare(&scene, &tags, &options(&common, None)) {
                Err(Error::ReferenceDiverged(frame)) => {
                    eprintln!("error: reference Newton solve did not converge in frame {frame}");
                    return Ok(Outcome::NotConverged);
                }
                r => r?,
            };
            println!("probe element {}", report.probe_element);
            println!(
                "{:>6} {:>14} {:>10} {:>10}",
                "frame", "solver", "iters", "to 1e-3"
            );
            for row in &report.iterations {
                let reach = report
                    .iterations_to(row.frame, row.solver, 1e-3)
                    .map_or("-".into(), |k| k.to_string());
                let mark = if row.converged { "" } else { "!" };
                println!(
                    "{:>6} {:>14} {:>9}{mark} {:>10}",
                    row.frame, row.solver, row.iterations, reach
                );
            }
            Ok(Outcome::Ok)
        }
        Verb::Check { common, solver } => {
            let scene = load(&common)?;
            let results = harness::check(&scene, &options(&common, solver))?;
            for r in &results {
                println!(
                    "{} {:<28} {}",
                    if r.passed { "pass" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            Ok(if results.iter().all(|r| r.passed) {
                Outcome::Ok
            } else {
                Outcome::NotConverged
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.verb) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
