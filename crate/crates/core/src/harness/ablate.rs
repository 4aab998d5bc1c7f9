//! Parameter sweeps summarised as append-only CSV.
//!
//! Each setting produces one row holding medians over the seeds. A
//! `<file>.schema` sidecar records the SHA-256 of the header line;
//! appending to a file with a different header is an error.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::problem::generate_problem;
use super::report::{run_solve, solve_report};
use crate::error::{Error, Result};
use crate::operators::SurrogateFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Ts,
    Repetitions,
    Gamma,
    Family,
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ts" | "t_s" => Ok(Sweep::Ts),
            "m" | "repetitions" => Ok(Sweep::Repetitions),
            "gamma" => Ok(Sweep::Gamma),
            "family" => Ok(Sweep::Family),
            _ => Err(Error::Config(format!("unknown sweep `{s}` (ts, m, gamma, family)"))),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::Ts => "ts",
            Sweep::Repetitions => "m",
            Sweep::Gamma => "gamma",
            Sweep::Family => "family",
        })
    }
}

impl Sweep {
    /// Settings swept when none are given.
    pub fn default_values(self, cfg: &ExperimentConfig) -> Vec<String> {
        match self {
            Sweep::Ts => ["25%", "50%", "75%", "95%"].map(String::from).to_vec(),
            Sweep::Repetitions => ["1", "2", "4", "6"].map(String::from).to_vec(),
            Sweep::Gamma => ["1", "1.5", "2", "3"].map(String::from).to_vec(),
            Sweep::Family => {
                let k = match cfg.model.surrogate {
                    SurrogateFamily::Kernel { size } => size,
                    SurrogateFamily::Neural { .. } => 9,
                };
                vec![format!("kernel:{k}"), "neural:4,8,16".into()]
            }
        }
    }

    /// Applies one setting to `cfg`.
    pub fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad {self} value `{value}`"));
        match self {
            Sweep::Ts => {
                let t = cfg.solver.schedule.steps;
                cfg.solver.t_s = match value.strip_suffix('%') {
                    Some(pct) => {
                        let f: f64 = pct.parse().map_err(|_| bad())?;
                        ((f / 100.0 * t as f64).round() as usize).clamp(1, t)
                    }
                    None => value.parse().map_err(|_| bad())?,
                };
            }
            Sweep::Repetitions => cfg.solver.repetitions = value.parse().map_err(|_| bad())?,
            Sweep::Gamma => cfg.solver.gamma = value.parse().map_err(|_| bad())?,
            Sweep::Family => {
                cfg.model.surrogate = parse_family(value).ok_or_else(bad)?;
                if let SurrogateFamily::Neural { .. } = cfg.model.surrogate {
                    cfg.solver.init = crate::blind::InitMode::Algorithm2;
                }
            }
        }
        cfg.validate()
    }
}

/// `kernel:<size>` or `neural:<w1>,<w2>,<w3>`.
pub fn parse_family(s: &str) -> Option<SurrogateFamily> {
    let (kind, arg) = s.split_once(':')?;
    match kind {
        "kernel" => Some(SurrogateFamily::Kernel { size: arg.parse().ok()? }),
        "neural" => {
            let w: Vec<usize> = arg.split(',').map(|v| v.trim().parse().ok()).collect::<Option<_>>()?;
            Some(SurrogateFamily::Neural {
                widths: w.try_into().ok()?,
            })
        }
        _ => None,
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub sweep: String,
    pub setting: String,
    pub t_s: usize,
    pub repetitions: usize,
    pub gamma: f64,
    pub family: String,
    pub seeds: usize,
    pub psnr_restored_median: f64,
    pub psnr_measurement_median: Option<f64>,
    pub kernel_mse_median: Option<f64>,
    pub surrogate_mse_median: f64,
    pub restored_ge_measurement: usize,
}

pub const HEADER: &str = "config,sweep,setting,t_s,repetitions,gamma,family,seeds,psnr_restored_median,\
psnr_measurement_median,kernel_mse_median,surrogate_mse_median,restored_ge_measurement";

pub fn header_hash() -> String {
    hex::encode(Sha256::digest(HEADER.as_bytes()))
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn family_label(f: &SurrogateFamily) -> String {
    match f {
        SurrogateFamily::Kernel { size } => format!("kernel:{size}"),
        SurrogateFamily::Neural { widths } => format!("neural:{},{},{}", widths[0], widths[1], widths[2]),
    }
}

/// Runs one setting over seeds `base_seed .. base_seed + seeds`.
pub fn run_setting(base: &ExperimentConfig, sweep: Sweep, value: &str, seeds: usize) -> Result<AblationRow> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut cfg = base.clone();
    sweep.apply(&mut cfg, value)?;
    let mut restored = Vec::new();
    let mut measured = Vec::new();
    let mut kernel = Vec::new();
    let mut surrogate = Vec::new();
    let mut wins = 0;
    for i in 0..seeds {
        let mut run = cfg.clone();
        run.seed = base.seed.wrapping_add(i as u64);
        let p = generate_problem(&run)?;
        let res = run_solve(&p, None)?;
        let rep = solve_report(&p, &res, "ablate")?;
        let r = rep.value("psnr_restored").unwrap_or(f64::NAN);
        restored.push(r);
        if let Some(m) = rep.value("psnr_measurement") {
            measured.push(m);
            if r >= m {
                wins += 1;
            }
        }
        if let Some(k) = rep.value("kernel_mse_final") {
            kernel.push(k);
        }
        surrogate.push(rep.value("surrogate_mse_final").unwrap_or(f64::NAN));
    }
    Ok(AblationRow {
        config: cfg.name.clone(),
        sweep: sweep.to_string(),
        setting: value.to_string(),
        t_s: cfg.solver.t_s,
        repetitions: cfg.solver.repetitions,
        gamma: cfg.solver.gamma,
        family: family_label(&cfg.model.surrogate),
        seeds,
        psnr_restored_median: median(&mut restored).unwrap_or(f64::NAN),
        psnr_measurement_median: median(&mut measured),
        kernel_mse_median: median(&mut kernel),
        surrogate_mse_median: median(&mut surrogate).unwrap_or(f64::NAN),
        restored_ge_measurement: wins,
    })
}

pub fn run_sweep(base: &ExperimentConfig, sweep: Sweep, values: &[String], seeds: usize) -> Result<Vec<AblationRow>> {
    values.iter().map(|v| run_setting(base, sweep, v, seeds)).collect()
}

fn schema_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".schema");
    PathBuf::from(s)
}

/// Appends rows to `path`, creating it with a header and schema sidecar
/// when absent. An existing file must carry the same header.
pub fn append_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let sidecar = schema_path(path);
    let fresh = !path.exists();
    if !fresh {
        let text = std::fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or("");
        if first != HEADER {
            return Err(Error::Format(format!("{} has a different header", path.display())));
        }
        if let Ok(h) = std::fs::read_to_string(&sidecar) {
            if h.trim() != header_hash() {
                return Err(Error::Format(format!("{} schema hash mismatch", sidecar.display())));
            }
        }
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    if fresh {
        writeln!(file, "{HEADER}")?;
        std::fs::write(&sidecar, header_hash() + "\n")?;
    }
    file.write_all(&body)?;
    Ok(())
}
