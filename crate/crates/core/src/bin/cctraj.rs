use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cctraj::conformal::Weighting;
use cctraj::noise::NoiseSpec;
use cctraj::pipeline::{Experiment, ReportRecord};
use cctraj::{Error, Result};

#[derive(Parser)]
#[command(name = "cctraj", version, about = "Chance-constrained trajectory optimization with conformal tightening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    weighting: Option<Weighting>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conformal,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (or load) the disturbance dataset and compute the score table and quantiles.
    Calibrate,
    /// Solve the tightened planning problem from a calibration artifact.
    Plan {
        /// Directory holding the calibration artifact (defaults to the output directory).
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Closed-loop Monte Carlo audit of the plan in the output directory.
    Simulate {
        /// Replace the noise model by zeros.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Gaussian-linearization comparison: plan, propagate, evaluate.
    Baseline,
    /// Audit the artifacts in the output directory.
    Verify,
}

fn load(cli: &Cli) -> Result<Experiment> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = cctraj::config::ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = cli.weighting {
        cfg.calibration.weighting = w;
    }
    Experiment::new(cfg)
}

fn print_report(r: &ReportRecord) {
    let s = &r.summary;
    println!(
        "{}: {} runs, max state failure {:.4} (k={}), terminal failure {:.4}, diverged {}",
        r.method, s.runs, s.max_failure, s.worst_step, s.terminal_failure, s.diverged
    );
    if let (Some(cov), Some(floor)) = (s.min_coverage, r.coverage_floor) {
        println!("min per-step coverage of the planning sets {cov:.4} (floor {floor:.4})");
    }
    if let Some(raw) = r.raw_min_coverage {
        println!("min per-step coverage of the raw C_k {raw:.4}");
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let ex = load(cli)?;
    let out = ex.output_dir().to_path_buf();
    match &cli.command {
        Command::Calibrate => {
            let (cal, hash) = ex.run_calibrate()?;
            let r = &cal.record;
            let c_min = r.c.iter().copied().fold(f64::INFINITY, f64::min);
            let c_max = r.c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("eta({}) = {:.6}", r.delta, r.eta);
            println!("C_k over k=1..{}: min {c_min:.6}, max {c_max:.6}", r.n);
            if r.collapse_not_conservative {
                println!("note: C_N < max_k C_k, so the constant margin is not conservative at every step");
            }
            println!("calibration {hash}");
            Ok(0)
        }
        Command::Plan { calibration } => {
            let (plan, hash) = match cli.mode.unwrap_or(Mode::Conformal) {
                Mode::Conformal => ex.run_plan(calibration.as_deref().unwrap_or(&out))?,
                Mode::Baseline => {
                    let (plan, _) = ex.run_baseline()?;
                    let hash = cctraj::io::hash_file(&out.join("baseline").join(cctraj::pipeline::PLAN_FILE))?;
                    (plan, hash)
                }
            };
            let h = &plan.header;
            println!(
                "{} plan: status {}, objective {:.6}, defect {:.2e}, violation {:.2e}, {} iterations, {:.2} s",
                h.method, h.status, h.objective, h.max_defect, h.max_violation, h.iterations, plan.wall_time
            );
            println!("plan {hash}");
            Ok(if h.status.is_usable() { 0 } else { 3 })
        }
        Command::Simulate { zero_noise } => {
            let zero = zero_noise.then(|| NoiseSpec::zero(ex.model.n_w()).build()).transpose()?;
            let dir = match cli.mode.unwrap_or(Mode::Conformal) {
                Mode::Conformal => out.clone(),
                Mode::Baseline => out.join("baseline"),
            };
            let report = ex.run_simulate(&dir, zero.as_ref())?;
            print_report(&report);
            Ok(0)
        }
        Command::Baseline => {
            let (plan, report) = ex.run_baseline()?;
            println!(
                "baseline plan: status {}, objective {:.6}, {} sweeps",
                plan.header.status,
                plan.header.objective,
                plan.header.baseline_sweeps.unwrap_or(0)
            );
            print_report(&report);
            Ok(0)
        }
        Command::Verify => {
            let checks = ex.verify(&out)?;
            if checks.is_empty() {
                return Err(Error::Config(format!("no artifacts found in {}", out.display())));
            }
            let mut ok = true;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
