//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::ablate::{append_rows, run_sweep, Sweep};
use super::config::ExperimentConfig;
use super::imageio::write_image;
use super::problem::{generate_problem, write_problem, Problem};
use super::report::{init_report, run_init, run_solve, solve_report};
use super::tensorio::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::operators::Measurement;

#[derive(Debug, Parser)]
#[command(name = "blindrestore", version, about = "Blind image restoration with a diffusion prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Master seed; overrides the config and the environment.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(Error::Config("pass --config <file> or --preset <name>".into())),
        };
        cfg.apply_env_seed()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the clean image, measurement and operator for a config.
    GenerateProblem {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the surrogate from a batch of fast guided samples and dump it.
    InitOperator {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore the measurement and write the image, parameters and report.
    Solve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Use `measurement.brt` from a generated problem directory
        /// instead of regenerating it.
        #[arg(long)]
        problem: Option<PathBuf>,
        /// Start from these surrogate parameters (BRT1), skipping initialisation.
        #[arg(long)]
        phi: Option<PathBuf>,
        /// Keep the starting parameters fixed.
        #[arg(long)]
        no_refine: bool,
    },
    /// Run the built-in oracle validations.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Sweep one setting over several seeds and append a CSV row per value.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// ts, m, gamma or family.
        #[arg(long)]
        sweep: String,
        /// Comma-separated settings; `ts` accepts percentages of T.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print one JSON line `{"error": {"kind": ..., "message": ...}}`
/// to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn write_timing(dir: &Path, command: &str, start: Instant) -> Result<()> {
    let secs = start.elapsed().as_secs_f64();
    let v = serde_json::json!({ "command": command, "wall_seconds": secs });
    std::fs::write(dir.join("timing.json"), v.to_string() + "\n")?;
    eprintln!("{command}: {secs:.2}s");
    Ok(())
}

fn load_problem(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Problem> {
    let mut p = generate_problem(cfg)?;
    if let Some(dir) = dir {
        let y = read_tensor(&dir.join("measurement.brt"))?;
        y.ensure_shape(p.measurement.y.shape())?;
        if let Ok(truth) = read_tensor(&dir.join("truth.brt")) {
            truth.ensure_shape(p.truth.shape())?;
            p.truth = truth;
        }
        p.measurement = Measurement {
            y,
            noise_std: cfg.problem.noise_std,
            provenance: format!("loaded from {}", dir.display()),
        };
    }
    Ok(p)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateProblem { cfg, out } => {
            let cfg = cfg.load()?;
            write_problem(&generate_problem(&cfg)?, &out)
        }
        Command::InitOperator { cfg, out } => {
            let start = Instant::now();
            let cfg = cfg.load()?;
            let p = generate_problem(&cfg)?;
            let init = run_init(&p)?;
            std::fs::create_dir_all(&out)?;
            write_tensor(&out.join("phi_init.brt"), &init.phi)?;
            write_tensor(&out.join("phi_start.brt"), &init.start)?;
            init_report(&p, &init)?.write(&out.join("report.json"))?;
            write_timing(&out, "init-operator", start)
        }
        Command::Solve {
            cfg,
            out,
            problem,
            phi,
            no_refine,
        } => {
            let start = Instant::now();
            let mut cfg = cfg.load()?;
            if no_refine {
                cfg.solver.refine = false;
            }
            let p = load_problem(&cfg, problem.as_deref())?;
            let phi = phi.map(|path| read_tensor(&path)).transpose()?;
            let res = run_solve(&p, phi.as_ref())?;
            std::fs::create_dir_all(&out)?;
            write_tensor(&out.join("restored.brt"), &res.x0)?;
            if matches!(res.x0.shape()[0], 1 | 3) {
                write_image(&out.join("restored.pgm"), &res.x0)?;
            }
            write_tensor(&out.join("phi_hat.brt"), &res.phi_hat)?;
            let report = solve_report(&p, &res, "solve")?;
            report.write(&out.join("report.json"))?;
            write_timing(&out, "solve", start)
        }
        Command::OracleCheck { seed } => {
            let outcomes = crate::oracle::self_check(seed)?;
            let mut failed = 0;
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} oracle check(s) failed")));
            }
            Ok(())
        }
        Command::Ablate {
            cfg,
            sweep,
            values,
            seeds,
            out,
        } => {
            let cfg = cfg.load()?;
            let sweep: Sweep = sweep.parse()?;
            let values = if values.is_empty() {
                sweep.default_values(&cfg)
            } else {
                values
            };
            let rows = run_sweep(&cfg, sweep, &values, seeds)?;
            append_rows(&out, &rows)
        }
    }
}
