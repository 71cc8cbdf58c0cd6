use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lanetopo::harness::{self, Axis, RunConfig, Split};
use lanetopo::metrics;
use lanetopo::scene;
use lanetopo::verification;

/// Lane topology decoder: scene generation, training, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "lanetopo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write generated scenes as JSON files.
    Scenegen {
        /// Run configuration; only the generator keys matter here.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoint, loss CSV and run record.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of scene JSON files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis over several seeds; resumes from finished runs.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// mode, k or m
        #[arg(long)]
        axis: String,
        /// Comma separated seeds, e.g. 0,1,2,3,4
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG plot of median TOP_ll and TOP_lt.
        #[arg(long)]
        svg: bool,
    },
    /// Run the finite-difference gradient suite; exits non-zero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = verification::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the overall lane score of four submetrics.
    Ols {
        #[arg(long = "det-l", allow_hyphen_values = true)]
        det_l: f64,
        #[arg(long = "det-t", allow_hyphen_values = true)]
        det_t: f64,
        #[arg(long = "top-ll", allow_hyphen_values = true)]
        top_ll: f64,
        #[arg(long = "top-lt", allow_hyphen_values = true)]
        top_lt: f64,
        /// Inputs and output are fractions in [0, 1] instead of points in [0, 100].
        #[arg(long)]
        fraction: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn scenegen(config: Option<&Path>, count: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let s = scene::generate(&cfg.generator, harness::scene_seed(seed, Split::Train, i))?;
        scene::save_file(&s, out.join(format!("scene_{i:05}.json")))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train(config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    let record = harness::train(&cfg)?;
    let first = record.losses.first().map_or(f64::NAN, |l| l.total);
    let last = record.losses.last().map_or(f64::NAN, |l| l.total);
    let m = &record.metrics;
    println!("loss {first:.4} -> {last:.4} over {} steps", record.losses.len());
    println!(
        "det_l {:.4}  det_t {:.4}  top_ll {:.4}  top_lt {:.4}  ols {:.4}",
        m.det_l, m.det_t, m.top_ll, m.top_lt, m.ols
    );
    println!(
        "checkpoint {} ({})",
        record.checkpoint.display(),
        record.checkpoint_hash
    );
    Ok(())
}

fn read_scenes(dir: &Path) -> Result<Vec<scene::SceneGraph>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| scene::load_file(p).map_err(Into::into)).collect()
}

fn eval(checkpoint: &Path, scenes: &Path, out: &Path) -> Result<()> {
    let scenes = read_scenes(scenes)?;
    let report = harness::evaluate(checkpoint, &scenes)?;
    std::fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} scenes: det_l {:.4}  det_t {:.4}  top_ll {:.4}  top_lt {:.4}  ols {:.4}",
        scenes.len(),
        report.det_l,
        report.det_t,
        report.top_ll,
        report.top_lt,
        report.ols
    );
    Ok(())
}

fn ablate(config: Option<&Path>, axis: &str, seeds: &[u64], out: &Path, svg: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let axis: Axis = axis.parse()?;
    let table = harness::ablate(&cfg, axis, seeds, out, svg)?;
    print!("{}", table.medians_csv());
    Ok(())
}

fn gradcheck(trials: usize, seed: u64) -> Result<bool> {
    let reports = verification::gradcheck_suite(trials, seed)?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passes();
        ok &= pass;
        println!(
            "{:<4} {:<22} trials {:>3}  entries {:>6}  max rel err {:.3e}",
            if pass { "ok" } else { "FAIL" },
            r.name,
            r.trials,
            r.report.checked,
            r.report.max_rel_err
        );
    }
    let total: usize = reports.iter().map(|r| r.trials).sum();
    println!(
        "{} cases, {total} trials, tolerance {:e}: {}",
        reports.len(),
        verification::GRADCHECK_TOLERANCE,
        if ok { "all passed" } else { "FAILED" }
    );
    Ok(ok)
}

fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64, fraction: bool) -> Result<()> {
    let s = if fraction { 1.0 } else { 100.0 };
    let v = metrics::ols(det_l / s, det_t / s, top_ll / s, top_lt / s)?;
    println!("{}", v * s);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Scenegen {
            config,
            count,
            seed,
            out,
        } => scenegen(config.as_deref(), count, seed, &out)?,
        Command::Train { config, out } => train(config.as_deref(), out)?,
        Command::Eval {
            checkpoint,
            scenes,
            out,
        } => eval(&checkpoint, &scenes, &out)?,
        Command::Ablate {
            config,
            axis,
            seeds,
            out,
            svg,
        } => ablate(config.as_deref(), &axis, &seeds, &out, svg)?,
        Command::Gradcheck { trials, seed } => {
            if !gradcheck(trials, seed)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ols {
            det_l,
            det_t,
            top_ll,
            top_lt,
            fraction,
        } => ols(det_l, det_t, top_ll, top_lt, fraction)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<lanetopo::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
