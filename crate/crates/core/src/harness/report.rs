//! Running experiments and summarising them as JSON reports.
//!
//! Reports contain only quantities that are a pure function of the config
//! and seed, so two identical runs write byte-identical files. Wall-clock
//! time goes to a separate `timing.json`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{derive_seed, ExperimentConfig};
use super::problem::{sample_component, Problem};
use crate::blind::{initial_params, solve, solve_from, InitOutcome, SolveResult};
use crate::codec::CodecKind;
use crate::error::{Error, Result};
use crate::operators::GroundTruthOperator;
use crate::oracle::{conv_matrix, from_vector, gaussian_posterior, psnr, to_vector};
use crate::tensor::{Image, Tensor};
use nalgebra::{DMatrix, DVector};

pub const REPORT_FORMAT: u32 = 1;

/// Number of held-out prior draws used for surrogate output errors.
pub const HELD_OUT: usize = 8;

/// Largest latent dimension for which the dense posterior oracle runs.
const ORACLE_MAX_DIM: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub definition: &'static str,
    pub version: u32,
}

fn metric(value: Option<f64>, definition: &'static str) -> Metric {
    Metric {
        value,
        definition,
        version: 1,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundSummary {
    pub rounds: usize,
    pub aborted: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub final_lr: Option<f64>,
}

impl RoundSummary {
    fn of(rounds: &[crate::blind::RefineRound]) -> Self {
        Self {
            rounds: rounds.len(),
            aborted: rounds.iter().filter(|r| r.aborted).count(),
            first_loss: rounds.first().map(|r| r.loss_before),
            last_loss: rounds.last().map(|r| r.loss_after),
            final_lr: rounds.last().map(|r| r.lr),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub format: u32,
    pub command: String,
    pub name: String,
    pub seed: u64,
    pub truth_component: usize,
    pub metrics: BTreeMap<String, Metric>,
    pub init: RoundSummary,
    pub refinement: RoundSummary,
    pub config: serde_json::Value,
}

impl Report {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(|m| m.value)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Held-out clean images drawn from the sharp components, independent of
/// the problem's truth.
pub fn held_out_images(p: &Problem, count: usize) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.config.seed, "held-out"));
    let k = p.config.problem.prior.patterns.len();
    (0..count)
        .map(|i| sample_component(&p.prior, &p.codec, i % k, &mut rng))
        .collect()
}

/// Mean over `images` of `MSE(A_phi(x), A(x))`.
pub fn surrogate_output_mse(p: &Problem, phi: &Tensor, images: &[Image]) -> Result<f64> {
    let mut total = 0.0;
    for x in images {
        let a = p.surrogate.apply(phi, x)?;
        let b = p.operator.apply(x)?;
        total += a.mse(&b)?;
    }
    Ok(total / images.len() as f64)
}

/// Mean squared difference to the true kernel when the surrogate is a
/// kernel of the same size as a convolution ground truth.
pub fn kernel_mse(p: &Problem, phi: &Tensor) -> Option<f64> {
    match &p.operator {
        GroundTruthOperator::Conv { kernel } if p.surrogate.is_kernel() && kernel.shape() == phi.shape() => {
            kernel.mse(phi).ok()
        }
        _ => None,
    }
}

/// Exact posterior mean of the clean image for single-Gaussian priors with
/// a convolution operator and the identity codec; `None` otherwise.
pub fn posterior_mean(p: &Problem) -> Result<Option<Image>> {
    let GroundTruthOperator::Conv { kernel } = &p.operator else {
        return Ok(None);
    };
    let sharp = p.prior.condition(super::problem::SHARP)?;
    if sharp.component_mask.len() != 1 || p.codec.kind() != CodecKind::Identity {
        return Ok(None);
    }
    let shape = p.truth.shape().to_vec();
    let n = p.truth.len();
    if n > ORACLE_MAX_DIM || p.measurement.noise_std <= 0.0 {
        return Ok(None);
    }
    let mu = to_vector(&p.prior.means()[sharp.component_mask[0]]);
    let s2 = p.prior.comp_std().powi(2);
    let cov = DMatrix::<f64>::identity(n, n) * s2;
    let a = conv_matrix(kernel, &shape)?;
    let y: DVector<f64> = to_vector(&p.measurement.y);
    let post = gaussian_posterior(&mu, &cov, &a, p.measurement.noise_std, &y)?;
    Ok(Some(from_vector(&post.mean, &shape)?))
}

/// Metrics shared by `solve` and `init-operator` reports.
fn operator_metrics(p: &Problem, metrics: &mut BTreeMap<String, Metric>, start: &Tensor, init: &Tensor) -> Result<()> {
    let held = held_out_images(p, HELD_OUT)?;
    metrics.insert(
        "kernel_mse_start".into(),
        metric(kernel_mse(p, start), "mean squared difference of the starting kernel to the true kernel"),
    );
    metrics.insert(
        "kernel_mse_init".into(),
        metric(kernel_mse(p, init), "mean squared difference of the initialised kernel to the true kernel"),
    );
    metrics.insert(
        "surrogate_mse_start".into(),
        metric(
            Some(surrogate_output_mse(p, start, &held)?),
            "mean over 8 held-out prior draws of MSE(surrogate(x), operator(x)) at the starting parameters",
        ),
    );
    metrics.insert(
        "surrogate_mse_init".into(),
        metric(
            Some(surrogate_output_mse(p, init, &held)?),
            "mean over 8 held-out prior draws of MSE(surrogate(x), operator(x)) after initialisation",
        ),
    );
    Ok(())
}

pub fn solve_report(p: &Problem, res: &SolveResult, command: &str) -> Result<Report> {
    let mut metrics = BTreeMap::new();
    let truth = &p.truth;
    metrics.insert(
        "psnr_restored".into(),
        metric(Some(psnr(&res.x0, truth, 1.0)?), "10 log10(1 / MSE(restored, truth)), capped at 99"),
    );
    let y_psnr = if p.measurement.y.shape() == truth.shape() {
        Some(psnr(&p.measurement.y, truth, 1.0)?)
    } else {
        None
    };
    metrics.insert(
        "psnr_measurement".into(),
        metric(y_psnr, "10 log10(1 / MSE(measurement, truth)), capped at 99; null if shapes differ"),
    );
    operator_metrics(p, &mut metrics, &res.phi_start, &res.phi_init)?;
    metrics.insert(
        "kernel_mse_final".into(),
        metric(kernel_mse(p, &res.phi_hat), "mean squared difference of the final kernel to the true kernel"),
    );
    let held = held_out_images(p, HELD_OUT)?;
    metrics.insert(
        "surrogate_mse_final".into(),
        metric(
            Some(surrogate_output_mse(p, &res.phi_hat, &held)?),
            "mean over 8 held-out prior draws of MSE(surrogate(x), operator(x)) with the final parameters",
        ),
    );
    let (d_x, d_y) = match posterior_mean(p)? {
        Some(m) => {
            let dy = if p.measurement.y.shape() == m.shape() {
                Some(p.measurement.y.distance(&m)?)
            } else {
                None
            };
            (Some(res.x0.distance(&m)?), dy)
        }
        None => (None, None),
    };
    metrics.insert(
        "oracle_distance_restored".into(),
        metric(d_x, "L2 distance of the restored image to the exact posterior mean; null without an oracle"),
    );
    metrics.insert(
        "oracle_distance_measurement".into(),
        metric(d_y, "L2 distance of the measurement to the exact posterior mean; null without an oracle"),
    );
    Ok(Report {
        format: REPORT_FORMAT,
        command: command.into(),
        name: p.config.name.clone(),
        seed: p.config.seed,
        truth_component: p.truth_component,
        metrics,
        init: RoundSummary::of(&res.init_rounds),
        refinement: RoundSummary::of(&res.refinements),
        config: config_echo(&p.config)?,
    })
}

pub fn init_report(p: &Problem, init: &InitOutcome) -> Result<Report> {
    let mut metrics = BTreeMap::new();
    operator_metrics(p, &mut metrics, &init.start, &init.phi)?;
    Ok(Report {
        format: REPORT_FORMAT,
        command: "init-operator".into(),
        name: p.config.name.clone(),
        seed: p.config.seed,
        truth_component: p.truth_component,
        metrics,
        init: RoundSummary::of(&init.rounds),
        refinement: RoundSummary::of(&[]),
        config: config_echo(&p.config)?,
    })
}

fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))
}

/// RNG for the solver, derived from the master seed.
pub fn solver_rng(cfg: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "solve"))
}

/// Runs the configured solver on `p`. With `phi` given, initialisation is
/// skipped and the sampler starts from it.
pub fn run_solve(p: &Problem, phi: Option<&Tensor>) -> Result<SolveResult> {
    let mut rng = solver_rng(&p.config);
    let cfg = &p.config.solver;
    match phi {
        Some(phi) => solve_from(&p.measurement, &p.prior, &p.codec, &p.surrogate, cfg, phi, &mut rng),
        None => solve(&p.measurement, &p.prior, &p.codec, &p.surrogate, cfg, &mut rng),
    }
}

/// Operator initialisation as `solve` would perform it, with the
/// batch-of-samples method forced on.
pub fn run_init(p: &Problem) -> Result<InitOutcome> {
    let mut rng = solver_rng(&p.config);
    let mut cfg = p.config.solver.clone();
    cfg.init = crate::blind::InitMode::Algorithm2;
    initial_params(&p.measurement, &p.prior, &p.codec, &p.surrogate, &cfg, &mut rng)
}
