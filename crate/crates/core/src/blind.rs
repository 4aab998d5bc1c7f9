//! Blind restoration driver: operator initialisation from a batch of fast
//! guided samples, then the main guided sampler with periodic operator
//! refinement.
//!
//! Randomness: `solve` consumes its RNG in this order: one SDEdit draw,
//! then per inner repetition one DDIM draw (only when `sigma_t > 0`) and
//! one time-travel draw (every repetition but the last of an outer step).
//! Operator initialisation derives one independent ChaCha8 stream per
//! batch member from a single `u64` taken from the caller's RNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grad::{AdamConfig, AdamState, Graph};
use crate::operators::{
    gaussian_kernel, operator_loss_graph, project_kernel, Measurement, SurrogateFamily, SurrogateOperator,
};
use crate::prior::{estimate_x0, Condition, GmmPrior, UNCONDITIONAL};
use crate::sampler::{ddim_step, ddim_step_to, guided_eps, mpgd_update, sdedit_init, time_travel, RegularizerKind};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::{Image, Latent, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Kernel surrogates only: a broad normalised Gaussian kernel.
    FixedPrior,
    /// Batch-of-samples maximum-likelihood initialisation.
    Algorithm2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineInput {
    /// Clean estimate before the guidance step.
    Pre,
    /// Clean estimate after the guidance step.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDirection {
    /// CFG-combined prediction in both DDIM terms.
    Guided,
    /// Unconditional prediction in the noise-direction term.
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    Flat,
    /// `c_t = base * sqrt(abar_{t-1})`.
    SqrtAlphaBarPrev,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSize {
    pub base: f64,
    pub schedule: StepSchedule,
}

impl Default for StepSize {
    fn default() -> Self {
        Self {
            base: 0.5,
            schedule: StepSchedule::SqrtAlphaBarPrev,
        }
    }
}

impl StepSize {
    /// Step for a move whose target grid point is `t_prev`.
    pub fn at(&self, t_prev: usize, s: &NoiseSchedule) -> f64 {
        match self.schedule {
            StepSchedule::Flat => self.base,
            StepSchedule::SqrtAlphaBarPrev => self.base * s.alpha_bar(t_prev).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Alg2Config {
    /// Outer iterations.
    pub iterations: usize,
    /// Trajectories per batch.
    pub batch: usize,
    /// Fast DDIM steps per trajectory.
    pub steps: usize,
}

impl Default for Alg2Config {
    fn default() -> Self {
        Self {
            iterations: 8,
            batch: 4,
            steps: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub schedule: ScheduleConfig,
    /// SDEdit start step.
    pub t_s: usize,
    /// Time-travel repetitions per outer step.
    pub repetitions: usize,
    /// Refine the operator on outer steps with `t % update_period == 0`.
    pub update_period: usize,
    /// Adam steps per refinement round.
    pub adam_steps: usize,
    pub adam: AdamConfig,
    pub gamma: f64,
    pub cond_pos: String,
    pub cond_neg: String,
    pub step_size: StepSize,
    pub regularizer: RegularizerKind,
    pub lambda_z: f64,
    pub lambda_phi: f64,
    pub init: InitMode,
    /// Std of the broad Gaussian kernel used by [`InitMode::FixedPrior`].
    pub fixed_prior_std: f64,
    pub alg2: Alg2Config,
    pub refine: bool,
    pub guidance: bool,
    pub project_kernel: bool,
    pub refine_input: RefineInput,
    pub noise_direction: NoiseDirection,
    /// Halve the Adam learning rate after this many consecutive rounds
    /// with an increasing loss; 0 disables.
    pub lr_halving_patience: usize,
    pub trace_latents: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            t_s: 150,
            repetitions: 4,
            update_period: 5,
            adam_steps: 50,
            adam: AdamConfig::default(),
            gamma: 2.0,
            cond_pos: "sharp".into(),
            cond_neg: "degraded".into(),
            step_size: StepSize::default(),
            regularizer: RegularizerKind::None,
            lambda_z: 0.0,
            lambda_phi: 0.0,
            init: InitMode::FixedPrior,
            fixed_prior_std: 2.5,
            alg2: Alg2Config::default(),
            refine: true,
            guidance: true,
            project_kernel: true,
            refine_input: RefineInput::Post,
            noise_direction: NoiseDirection::Guided,
            lr_halving_patience: 3,
            trace_latents: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.schedule.steps;
        let bad = |m: String| Err(Error::Config(m));
        if self.t_s == 0 || self.t_s > t {
            return bad(format!("t_s = {} must lie in [1, {t}]", self.t_s));
        }
        if self.repetitions == 0 || self.update_period == 0 || self.adam_steps == 0 {
            return bad("repetitions, update_period and adam_steps must be >= 1".into());
        }
        if self.alg2.iterations == 0 || self.alg2.batch == 0 || self.alg2.steps == 0 {
            return bad("alg2 counts must be >= 1".into());
        }
        if self.alg2.steps > t {
            return bad(format!("alg2.steps = {} exceeds T = {t}", self.alg2.steps));
        }
        if !self.gamma.is_finite() || self.step_size.base < 0.0 || self.lambda_phi < 0.0 || self.lambda_z < 0.0 {
            return bad("gamma must be finite; step size and lambdas nonnegative".into());
        }
        if self.fixed_prior_std <= 0.0 {
            return bad("fixed_prior_std must be positive".into());
        }
        if self.adam.lr <= 0.0 {
            return bad("adam.lr must be positive".into());
        }
        self.schedule.build().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Per inner-repetition diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerStepTrace {
    pub t: usize,
    pub j: usize,
    pub guided: bool,
    pub guidance_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub z_t_norm: f64,
    pub z0_pre_norm: f64,
    pub z0_post_norm: f64,
    pub rng_draws: usize,
    pub phi_fingerprint: u64,
    pub latents: Option<[Latent; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineRound {
    pub t: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub lr: f64,
    pub aborted: bool,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub x0: Image,
    pub phi_hat: Tensor,
    /// Parameters before operator initialisation.
    pub phi_start: Tensor,
    /// Parameters the sampler started from.
    pub phi_init: Tensor,
    pub traces: Vec<SamplerStepTrace>,
    pub refinements: Vec<RefineRound>,
    pub init_rounds: Vec<RefineRound>,
}

/// Bit-level fingerprint of a tensor for alternation checks.
pub fn fingerprint(t: &Tensor) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// The operator initialisation a config asks for when no algorithm run is requested.
pub fn fixed_prior_params(surrogate: &SurrogateOperator, cfg: &SolverConfig) -> Result<Tensor> {
    match surrogate.family() {
        SurrogateFamily::Kernel { size } => gaussian_kernel(*size, cfg.fixed_prior_std),
        SurrogateFamily::Neural { .. } => Err(Error::Config(
            "neural surrogates have no fixed prior; use init = \"algorithm2\"".into(),
        )),
    }
}

struct Conditions<'a> {
    pos: &'a Condition,
    neg: &'a Condition,
    unc: &'a Condition,
}

impl<'a> Conditions<'a> {
    fn resolve(prior: &'a GmmPrior, cfg: &SolverConfig) -> Result<Self> {
        Ok(Self {
            pos: prior.condition(&cfg.cond_pos)?,
            neg: prior.condition(&cfg.cond_neg)?,
            unc: prior.condition(UNCONDITIONAL)?,
        })
    }
}

/// Mutable Adam bookkeeping shared by consecutive rounds.
pub struct RefineState {
    adam: AdamState,
    increases: usize,
    last_loss: Option<f64>,
    patience: usize,
}

impl RefineState {
    pub fn new(len: usize, cfg: &SolverConfig) -> Self {
        Self {
            adam: AdamState::new(len, cfg.adam),
            increases: 0,
            last_loss: None,
            patience: cfg.lr_halving_patience,
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam.config.lr
    }

    fn record(&mut self, loss: f64) {
        if let Some(prev) = self.last_loss {
            if loss > prev {
                self.increases += 1;
            } else {
                self.increases = 0;
            }
        }
        self.last_loss = Some(loss);
        if self.patience > 0 && self.increases >= self.patience {
            self.adam.config.lr *= 0.5;
            self.increases = 0;
        }
    }
}

/// Batch-averaged operator loss and its parameter gradient.
fn batch_loss_and_grad(
    phi: &Tensor,
    z0s: &[Latent],
    y: &Image,
    surrogate: &SurrogateOperator,
    codec: &Codec,
    lambda_phi: f64,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let n = z0s.len() as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(phi.shape()));
    for z0 in z0s {
        let mut g = Graph::new();
        let p = g.leaf(phi.clone());
        let z = g.leaf(z0.clone());
        let yv = g.leaf(y.clone());
        let l = operator_loss_graph(&mut g, surrogate, p, z, codec, yv, lambda_phi)?;
        total += g.scalar_value(l) / n;
        if let Some(acc) = grad.as_mut() {
            let gp = g.backward(l)?.take(p);
            acc.axpy(1.0 / n, &gp)?;
        }
    }
    Ok((total, grad))
}

/// `adam_steps` Adam steps on the (batch-averaged) operator loss with the
/// latents fixed. Returns the lowest-loss iterate evaluated, which is never
/// worse than the starting point. A non-finite loss or gradient aborts the
/// round and keeps the incoming parameters. Kernel parameters are projected
/// onto the simplex afterwards when `project` is set.
#[allow(clippy::too_many_arguments)]
pub fn refine_operator_batch(
    phi_hat: &Tensor,
    z0s: &[Latent],
    y: &Image,
    surrogate: &SurrogateOperator,
    codec: &Codec,
    adam_steps: usize,
    state: &mut RefineState,
    lambda_phi: f64,
    project: bool,
    t: usize,
) -> Result<(Tensor, RefineRound)> {
    if adam_steps == 0 {
        return Err(Error::InvalidArgument("refinement needs at least one Adam step".into()));
    }
    surrogate.check_params(phi_hat)?;
    let z_prints: Vec<u64> = if cfg!(debug_assertions) {
        z0s.iter().map(fingerprint).collect()
    } else {
        Vec::new()
    };
    let mut phi = phi_hat.clone();
    let mut best = phi.clone();
    let mut best_loss = f64::INFINITY;
    let mut loss_before = f64::NAN;
    let mut aborted = false;
    for k in 0..=adam_steps {
        let want_grad = k < adam_steps;
        let (loss, grad) = batch_loss_and_grad(&phi, z0s, y, surrogate, codec, lambda_phi, want_grad)?;
        if k == 0 {
            loss_before = loss;
        }
        let grad_ok = grad.as_ref().map_or(true, Tensor::is_finite);
        if !loss.is_finite() || !grad_ok {
            aborted = true;
            break;
        }
        if loss < best_loss {
            best_loss = loss;
            best.clone_from(&phi);
        }
        if let Some(g) = grad {
            state.adam.update(phi.data_mut(), g.data())?;
        }
    }
    debug_assert!(z0s.iter().map(fingerprint).eq(z_prints.iter().copied()));
    if aborted {
        let round = RefineRound {
            t,
            loss_before,
            loss_after: loss_before,
            lr: state.lr(),
            aborted: true,
        };
        return Ok((phi_hat.clone(), round));
    }
    let mut out = best;
    let mut loss_after = best_loss;
    if project && surrogate.is_kernel() {
        out = project_kernel(&out);
        loss_after = batch_loss_and_grad(&out, z0s, y, surrogate, codec, lambda_phi, false)?.0;
    }
    let round = RefineRound {
        t,
        loss_before,
        loss_after,
        lr: state.lr(),
        aborted: false,
    };
    state.record(loss_after);
    Ok((out, round))
}

/// Single-latent operator refinement with a fresh Adam state.
#[allow(clippy::too_many_arguments)]
pub fn refine_operator(
    phi_hat: &Tensor,
    z0t: &Latent,
    y: &Image,
    surrogate: &SurrogateOperator,
    codec: &Codec,
    adam_steps: usize,
    adam: AdamConfig,
    lambda_phi: f64,
    project: bool,
) -> Result<Tensor> {
    let mut state = RefineState {
        adam: AdamState::new(phi_hat.len(), adam),
        increases: 0,
        last_loss: None,
        patience: 0,
    };
    let (phi, _) = refine_operator_batch(
        phi_hat,
        std::slice::from_ref(z0t),
        y,
        surrogate,
        codec,
        adam_steps,
        &mut state,
        lambda_phi,
        project,
        0,
    )?;
    Ok(phi)
}

fn check_problem(y: &Measurement, prior: &GmmPrior, codec: &Codec, cfg: &SolverConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    y.y.ensure_shape(codec.image_shape())?;
    if prior.latent_shape() != codec.latent_shape() {
        return Err(Error::shape(codec.latent_shape(), prior.latent_shape()));
    }
    cfg.schedule.build()
}

/// Operator initialisation from batches of fast guided samples.
///
/// Each of `alg2.iterations` rounds draws `alg2.batch` SDEdit latents at
/// `t_s`, runs `alg2.steps` strided DDIM steps down to 0 (guidance skipped
/// in the first round), then fits the surrogate to the final clean
/// estimates with `adam_steps` Adam steps on the batch-averaged loss.
#[allow(clippy::too_many_arguments)]
pub fn init_operator<R: Rng + ?Sized>(
    y: &Measurement,
    prior: &GmmPrior,
    codec: &Codec,
    surrogate: &SurrogateOperator,
    cfg: &SolverConfig,
    phi_start: &Tensor,
    rng: &mut R,
) -> Result<(Tensor, Vec<RefineRound>)> {
    let sched = check_problem(y, prior, codec, cfg)?;
    surrogate.check_params(phi_start)?;
    let conds = Conditions::resolve(prior, cfg)?;
    let grid = sched.strided_grid(cfg.t_s, cfg.alg2.steps);
    let reg = cfg.regularizer.instance();
    let mut phi = phi_start.clone();
    let mut state = RefineState::new(phi.len(), cfg);
    let mut rounds = Vec::with_capacity(cfg.alg2.iterations);
    for j in 1..=cfg.alg2.iterations {
        let base: u64 = rng.gen();
        let mut z0s = Vec::with_capacity(cfg.alg2.batch);
        for i in 0..cfg.alg2.batch {
            let mut stream = ChaCha8Rng::seed_from_u64(base);
            stream.set_stream(i as u64);
            let mut z = sdedit_init(&y.y, codec, cfg.t_s, &sched, &mut stream)?;
            let mut z0 = z.clone();
            for w in grid.windows(2) {
                let (t, t_prev) = (w[0], w[1]);
                let eps = guided_eps(prior, &z, t, conds.pos, conds.neg, cfg.gamma, &sched)?;
                z0 = estimate_x0(&z, &eps, t, &sched)?;
                if j != 1 && cfg.guidance {
                    let c_t = cfg.step_size.at(t_prev, &sched);
                    z0 = mpgd_update(&z0, &y.y, surrogate, &phi, codec, c_t, reg, cfg.lambda_z)?.z0;
                }
                let dir = noise_direction(prior, &z, t, &eps, &conds, cfg, &sched)?;
                z = ddim_step_to(&z0, &dir, t, t_prev, &sched, &mut stream)?;
            }
            z0s.push(z0);
        }
        let (next, round) = refine_operator_batch(
            &phi,
            &z0s,
            &y.y,
            surrogate,
            codec,
            cfg.adam_steps,
            &mut state,
            cfg.lambda_phi,
            cfg.project_kernel,
            j,
        )?;
        if round.aborted || !round.loss_after.is_finite() {
            return Err(Error::NonFinite(format!("operator initialisation round {j}")));
        }
        phi = next;
        rounds.push(round);
    }
    Ok((phi, rounds))
}

fn noise_direction(
    prior: &GmmPrior,
    z: &Latent,
    t: usize,
    eps: &crate::prior::NoisePrediction,
    conds: &Conditions<'_>,
    cfg: &SolverConfig,
    sched: &NoiseSchedule,
) -> Result<crate::prior::NoisePrediction> {
    match cfg.noise_direction {
        NoiseDirection::Guided => Ok(eps.clone()),
        NoiseDirection::Unconditional => prior.exact_epsilon(z, t, conds.unc, sched),
    }
}

/// Starting operator parameters for the main sampler.
#[derive(Clone, Debug)]
pub struct InitOutcome {
    /// Parameters before any fitting (random draw or fixed prior).
    pub start: Tensor,
    pub phi: Tensor,
    pub rounds: Vec<RefineRound>,
}

/// Resolves the starting operator parameters for `solve` according to
/// `cfg.init`, running operator initialisation when requested.
pub fn initial_params<R: Rng + ?Sized>(
    y: &Measurement,
    prior: &GmmPrior,
    codec: &Codec,
    surrogate: &SurrogateOperator,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<InitOutcome> {
    match cfg.init {
        InitMode::FixedPrior => {
            let phi = fixed_prior_params(surrogate, cfg)?;
            Ok(InitOutcome {
                start: phi.clone(),
                phi,
                rounds: Vec::new(),
            })
        }
        InitMode::Algorithm2 => {
            let start = surrogate.random_params(rng);
            let (phi, rounds) = init_operator(y, prior, codec, surrogate, cfg, &start, rng)?;
            Ok(InitOutcome { start, phi, rounds })
        }
    }
}

/// Full restoration: operator initialisation per `cfg.init`, then the
/// guided sampler with periodic refinement.
pub fn solve<R: Rng + ?Sized>(
    y: &Measurement,
    prior: &GmmPrior,
    codec: &Codec,
    surrogate: &SurrogateOperator,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<SolveResult> {
    check_problem(y, prior, codec, cfg)?;
    let init = initial_params(y, prior, codec, surrogate, cfg, rng)?;
    let mut out = solve_from(y, prior, codec, surrogate, cfg, &init.phi, rng)?;
    out.phi_start = init.start;
    out.init_rounds = init.rounds;
    Ok(out)
}

/// The guided sampler with periodic operator refinement, starting from `phi_init`.
pub fn solve_from<R: Rng + ?Sized>(
    y: &Measurement,
    prior: &GmmPrior,
    codec: &Codec,
    surrogate: &SurrogateOperator,
    cfg: &SolverConfig,
    phi_init: &Tensor,
    rng: &mut R,
) -> Result<SolveResult> {
    let sched = check_problem(y, prior, codec, cfg)?;
    surrogate.check_params(phi_init)?;
    let conds = Conditions::resolve(prior, cfg)?;
    let reg = cfg.regularizer.instance();
    let m = cfg.repetitions;
    let mut phi = phi_init.clone();
    let mut state = RefineState::new(phi.len(), cfg);
    let mut traces = Vec::with_capacity(cfg.t_s * m);
    let mut refinements = Vec::new();

    let mut z_t = sdedit_init(&y.y, codec, cfg.t_s, &sched, rng)?;
    for t in (1..=cfg.t_s).rev() {
        let mut z_prev = z_t.clone();
        let mut refine_z0 = None;
        for j in 1..=m {
            let eps = guided_eps(prior, &z_t, t, conds.pos, conds.neg, cfg.gamma, &sched)?;
            let z0_pre = estimate_x0(&z_t, &eps, t, &sched)?;
            let guided = cfg.guidance && j % 2 == 0;
            let phi_print = fingerprint(&phi);
            let (z0, loss, grad_norm) = if guided {
                let c_t = cfg.step_size.at(t - 1, &sched);
                let g = mpgd_update(&z0_pre, &y.y, surrogate, &phi, codec, c_t, reg, cfg.lambda_z)?;
                (g.z0, Some(g.loss), Some(g.grad_norm))
            } else {
                (z0_pre.clone(), None, None)
            };
            debug_assert_eq!(phi_print, fingerprint(&phi));
            let dir = noise_direction(prior, &z_t, t, &eps, &conds, cfg, &sched)?;
            let mut draws = 0;
            if sched.ddim_sigma(t) > 0.0 {
                draws += 1;
            }
            z_prev = ddim_step(&z0, &dir, t, &sched, rng)?;
            if !z_prev.is_finite() {
                return Err(Error::NonFinite(format!("latent at step {t}, repetition {j}")));
            }
            let traveled = if j < m {
                draws += 1;
                Some(time_travel(&z_prev, t, &sched, rng)?)
            } else {
                None
            };
            traces.push(SamplerStepTrace {
                t,
                j,
                guided,
                guidance_loss: loss,
                grad_norm,
                z_t_norm: z_t.norm(),
                z0_pre_norm: z0_pre.norm(),
                z0_post_norm: z0.norm(),
                rng_draws: draws,
                phi_fingerprint: phi_print,
                latents: cfg
                    .trace_latents
                    .then(|| [z_t.clone(), z0_pre.clone(), z0.clone()]),
            });
            if j == m {
                refine_z0 = Some(match cfg.refine_input {
                    RefineInput::Pre => z0_pre,
                    RefineInput::Post => z0,
                });
            }
            if let Some(next) = traveled {
                z_t = next;
            }
        }
        if cfg.refine && t % cfg.update_period == 0 {
            let z0 = refine_z0.expect("at least one repetition");
            let (next, round) = refine_operator_batch(
                &phi,
                std::slice::from_ref(&z0),
                &y.y,
                surrogate,
                codec,
                cfg.adam_steps,
                &mut state,
                cfg.lambda_phi,
                cfg.project_kernel,
                t,
            )?;
            phi = next;
            refinements.push(round);
        }
        z_t = z_prev;
    }
    let x0 = codec.decode(&z_t)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("restored image".into()));
    }
    Ok(SolveResult {
        x0,
        phi_hat: phi,
        phi_start: phi_init.clone(),
        phi_init: phi_init.clone(),
        traces,
        refinements,
        init_rounds: Vec::new(),
    })
}
