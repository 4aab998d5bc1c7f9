//! Diffusion mechanics of the restoration loop: SDEdit initialisation,
//! guided noise prediction, MPGD data-consistency steps on the clean
//! estimate, DDIM steps, and time-travel renoising.
//!
//! Random draws are always standard normal tensors of latent shape,
//! consumed in row-major order, one tensor per call that needs noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::operators::SurrogateOperator;
use crate::prior::{cfg_combine, estimate_x0, Condition, GmmPrior, NoisePrediction};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Image, Latent, Tensor};

/// `z_{T_s} = sqrt(abar) E(y) + sqrt(1 - abar) eps`; one draw.
pub fn sdedit_init<R: Rng + ?Sized>(
    y: &Image,
    codec: &Codec,
    t_s: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    s.check_step(t_s)?;
    let e = codec.encode(y)?;
    let abar = s.alpha_bar(t_s);
    let noise = Tensor::randn(e.shape(), rng);
    e.lincomb(abar.sqrt(), &noise, (1.0 - abar).sqrt())
}

/// CFG-combined prediction from the positive and negative conditions.
pub fn guided_eps(
    prior: &GmmPrior,
    z_t: &Latent,
    t: usize,
    cond_pos: &Condition,
    cond_neg: &Condition,
    gamma: f64,
    s: &NoiseSchedule,
) -> Result<NoisePrediction> {
    let pos = prior.exact_epsilon(z_t, t, cond_pos, s)?;
    if cond_pos == cond_neg {
        return Ok(pos);
    }
    let neg = prior.exact_epsilon(z_t, t, cond_neg, s)?;
    cfg_combine(&neg, &pos, gamma)
}

/// A differentiable penalty between the decoded estimate and the measurement.
pub trait Regularizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var>;
}

/// `||dx(x) - dx(y)||^2 + ||dy(x) - dy(y)||^2` with forward differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientDifference;

impl Regularizer for GradientDifference {
    fn name(&self) -> &'static str {
        "gradient-difference"
    }

    fn build(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let r = g.sub(x, y)?;
        let dx = g.diff(r, 2)?;
        let dy = g.diff(r, 1)?;
        let a = g.sum_sq(dx);
        let b = g.sum_sq(dy);
        g.add(a, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    #[default]
    None,
    GradientDifference,
}

impl RegularizerKind {
    pub fn instance(self) -> Option<&'static dyn Regularizer> {
        static GD: GradientDifference = GradientDifference;
        match self {
            RegularizerKind::None => None,
            RegularizerKind::GradientDifference => Some(&GD),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceOutcome {
    pub z0: Latent,
    /// Guidance objective at the pre-step estimate.
    pub loss: f64,
    /// Norm of the latent gradient.
    pub grad_norm: f64,
}

/// One MPGD step on the clean latent estimate with the operator held fixed:
/// `z0 <- z0 - c_t * grad_z0 (||y - A(D(z0))||^2 + lambda_z * Reg(D(z0), y))`.
#[allow(clippy::too_many_arguments)]
pub fn mpgd_update(
    z0t: &Latent,
    y: &Image,
    surrogate: &SurrogateOperator,
    phi_hat: &Tensor,
    codec: &Codec,
    c_t: f64,
    reg: Option<&dyn Regularizer>,
    lambda_z: f64,
) -> Result<GuidanceOutcome> {
    if !(c_t >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance step {c_t} must be >= 0")));
    }
    let mut g = Graph::new();
    let z = g.leaf(z0t.clone());
    let phi = g.leaf(phi_hat.clone());
    let yv = g.leaf(y.clone());
    let x = g.decode(z, codec)?;
    let ax = surrogate.build(&mut g, phi, x)?;
    let r = g.sub(yv, ax)?;
    let mut loss = g.sum_sq(r);
    if let (Some(reg), true) = (reg, lambda_z != 0.0) {
        let p = reg.build(&mut g, x, yv)?;
        let p = g.scale(p, lambda_z);
        loss = g.add(loss, p)?;
    }
    let loss_value = g.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("guidance loss".into()));
    }
    let grad = g.backward(loss)?.take(z);
    let grad_norm = grad.norm();
    let mut z0 = z0t.clone();
    if c_t > 0.0 {
        z0.axpy(-c_t, &grad)?;
    }
    Ok(GuidanceOutcome {
        z0,
        loss: loss_value,
        grad_norm,
    })
}

/// DDIM step `t -> t - 1` that recombines the (possibly guided) clean
/// estimate with the prior's noise prediction. Draws one noise tensor
/// when `sigma_t > 0`.
pub fn ddim_step<R: Rng + ?Sized>(
    z0t: &Latent,
    eps_hat: &NoisePrediction,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    s.check_step(t)?;
    ddim_step_to(z0t, eps_hat, t, t - 1, s, rng)
}

/// DDIM step between arbitrary grid points `t -> t_prev`, `t_prev < t`.
pub fn ddim_step_to<R: Rng + ?Sized>(
    z0t: &Latent,
    eps_hat: &NoisePrediction,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("DDIM step {t} -> {t_prev} is not descending")));
    }
    let a_prev = s.alpha_bar(t_prev);
    let sigma = s.sigma_between(t, t_prev);
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut z = z0t.lincomb(a_prev.sqrt(), &eps_hat.eps, dir)?;
    if sigma > 0.0 {
        let noise = Tensor::randn(z.shape(), rng);
        z.axpy(sigma, &noise)?;
    }
    Ok(z)
}

/// Renoise `z_{t-1}` back to step `t`:
/// `z_t = sqrt(abar_t / abar_{t-1}) z_{t-1} + sqrt(1 - abar_t / abar_{t-1}) eps'`.
pub fn time_travel<R: Rng + ?Sized>(z_prev: &Latent, t: usize, s: &NoiseSchedule, rng: &mut R) -> Result<Latent> {
    s.check_step(t)?;
    let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
    let noise = Tensor::randn(z_prev.shape(), rng);
    z_prev.lincomb(ratio.sqrt(), &noise, (1.0 - ratio).max(0.0).sqrt())
}

/// Plain (unguided) DDIM trajectory from `z_start` at `t_start` down to 0.
#[allow(clippy::too_many_arguments)]
pub fn sample_ddim<R: Rng + ?Sized>(
    prior: &GmmPrior,
    cond_pos: &Condition,
    cond_neg: &Condition,
    gamma: f64,
    z_start: &Latent,
    t_start: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    let mut z = z_start.clone();
    for t in (1..=t_start).rev() {
        let eps = guided_eps(prior, &z, t, cond_pos, cond_neg, gamma, s)?;
        let z0 = estimate_x0(&z, &eps, t, s)?;
        z = ddim_step(&z0, &eps, t, s, rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::dirac_kernel;
    use crate::prior::UNCONDITIONAL;
    use crate::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sdedit_with_unit_alpha_returns_encoding() {
        // a schedule whose first step barely noises: abar_1 = 1 - 1e-300 ~ 1
        let s = NoiseSchedule::from_betas(vec![1e-300], 1.0).unwrap();
        let codec = Codec::identity(&[1, 4, 4]).unwrap();
        let y = Tensor::randn(&[1, 4, 4], &mut rng(1));
        let z = sdedit_init(&y, &codec, 1, &s, &mut rng(2)).unwrap();
        assert!(z.distance(&y).unwrap() < 1e-12);
    }

    #[test]
    fn sdedit_moments() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        let codec = Codec::identity(&[1, 1, 2]).unwrap();
        let y = Tensor::new(vec![1, 1, 2], vec![0.8, -0.3]).unwrap();
        let t_s = 150;
        let a = s.alpha_bar(t_s);
        let n = 10_000;
        let mut r = rng(3);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = sdedit_init(&y, &codec, t_s, &s, &mut r).unwrap();
            for i in 0..2 {
                sum[i] += z.data()[i];
                sq[i] += z.data()[i] * z.data()[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let target_var = 1.0 - a;
            assert!((mean - a.sqrt() * y.data()[i]).abs() < 3.0 * (target_var / n as f64).sqrt());
            assert!((var - target_var).abs() < 3.0 * target_var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn guided_eps_collapses() {
        let s = make_schedule(100, 1e-4, 0.02, 1.0).unwrap();
        let mk = |v: f64| Tensor::new(vec![1], vec![v]).unwrap();
        let mut prior = GmmPrior::uniform(vec![mk(-1.0), mk(1.0)], 0.2).unwrap();
        prior.add_condition(Condition::new("pos", vec![1])).unwrap();
        let pos = prior.condition("pos").unwrap().clone();
        let unc = prior.condition(UNCONDITIONAL).unwrap().clone();
        let z = mk(0.3);
        let e_pos = prior.exact_epsilon(&z, 50, &pos, &s).unwrap();
        assert_eq!(guided_eps(&prior, &z, 50, &pos, &pos, 7.0, &s).unwrap(), e_pos);
        let g1 = guided_eps(&prior, &z, 50, &pos, &unc, 1.0, &s).unwrap();
        assert!((g1.eps.data()[0] - e_pos.eps.data()[0]).abs() < 1e-15);
        // recomposition oracle
        let e_unc = prior.exact_epsilon(&z, 50, &unc, &s).unwrap();
        let manual = e_unc.eps.data()[0] + 2.5 * (e_pos.eps.data()[0] - e_unc.eps.data()[0]);
        let g = guided_eps(&prior, &z, 50, &pos, &unc, 2.5, &s).unwrap();
        assert!((g.eps.data()[0] - manual).abs() < 1e-15);
    }

    #[test]
    fn mpgd_trivial_cases() {
        let codec = Codec::identity(&[1, 6, 6]).unwrap();
        let sur = SurrogateOperator::kernel(3, 1).unwrap();
        let z = Tensor::randn(&[1, 6, 6], &mut rng(4));
        let y = Tensor::randn(&[1, 6, 6], &mut rng(5));
        let phi = dirac_kernel(3);
        let out = mpgd_update(&z, &y, &sur, &phi, &codec, 0.0, None, 0.0).unwrap();
        assert_eq!(out.z0, z);
        let out = mpgd_update(&z, &z, &sur, &phi, &codec, 0.7, None, 0.0).unwrap();
        assert_eq!(out.z0, z);
        assert_eq!(out.grad_norm, 0.0);
        assert!(mpgd_update(&z, &y, &sur, &phi, &codec, -1.0, None, 0.0).is_err());
    }

    #[test]
    fn mpgd_identity_half_step_projects_onto_measurement() {
        // gradient of ||y - z||^2 is 2(z - y); step 0.5 lands on y
        let codec = Codec::identity(&[1, 4, 4]).unwrap();
        let sur = SurrogateOperator::kernel(1, 1).unwrap();
        let z = Tensor::randn(&[1, 4, 4], &mut rng(6));
        let y = Tensor::randn(&[1, 4, 4], &mut rng(7));
        let phi = dirac_kernel(1);
        let out = mpgd_update(&z, &y, &sur, &phi, &codec, 0.5, None, 0.0).unwrap();
        assert!(out.z0.distance(&y).unwrap() < 1e-12);
        let reg = GradientDifference;
        let out = mpgd_update(&z, &y, &sur, &phi, &codec, 0.1, Some(&reg), 1.0).unwrap();
        assert!(out.z0.is_finite());
    }

    #[test]
    fn final_ddim_step_returns_clean_estimate() {
        let s = make_schedule(10, 1e-4, 0.02, 1.0).unwrap();
        let z0 = Tensor::randn(&[1, 3, 3], &mut rng(8));
        let eps = NoisePrediction { eps: Tensor::randn(&[1, 3, 3], &mut rng(9)) };
        let z = ddim_step(&z0, &eps, 1, &s, &mut rng(10)).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn time_travel_zero_noise_when_no_decay() {
        let s = NoiseSchedule::from_betas(vec![0.1, 1e-300], 1.0).unwrap();
        let z = Tensor::randn(&[1, 2, 2], &mut rng(11));
        let out = time_travel(&z, 2, &s, &mut rng(12)).unwrap();
        assert!(out.distance(&z).unwrap() < 1e-12);
    }

    #[test]
    fn time_travel_moments() {
        let s = make_schedule(100, 1e-4, 0.02, 1.0).unwrap();
        let t = 60;
        let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
        let z = Tensor::new(vec![1], vec![1.7]).unwrap();
        let n = 20_000;
        let mut r = rng(13);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += time_travel(&z, t, &s, &mut r).unwrap().data()[0];
        }
        let mean = sum / n as f64;
        let se = ((1.0 - ratio) / n as f64).sqrt();
        assert!((mean - ratio.sqrt() * 1.7).abs() < 4.0 * se);
    }

    #[test]
    fn time_travel_composition_matches_marginal() {
        // x0 noised to t-1, then time-travelled: N(sqrt(abar_t) x0, (1 - abar_t))
        let s = make_schedule(100, 1e-4, 0.02, 1.0).unwrap();
        let t = 80;
        let x0 = 0.6;
        let n = 20_000;
        let mut r = rng(14);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let ap = s.alpha_bar(t - 1);
            let e: f64 = r.sample(rand_distr::StandardNormal);
            let zp = Tensor::new(vec![1], vec![ap.sqrt() * x0 + (1.0 - ap).sqrt() * e]).unwrap();
            let v = time_travel(&zp, t, &s, &mut r).unwrap().data()[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let a = s.alpha_bar(t);
        assert!((mean - a.sqrt() * x0).abs() < 4.0 * ((1.0 - a) / n as f64).sqrt());
        assert!((var - (1.0 - a)).abs() < 4.0 * (1.0 - a) * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn deterministic_ddim_matches_scalar_recurrence() {
        let s = make_schedule(200, 1e-4, 0.02, 0.0).unwrap();
        let (mu, sd) = (0.4, 0.3);
        let prior = GmmPrior::uniform(vec![Tensor::new(vec![1], vec![mu]).unwrap()], sd).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        let z_t = Tensor::new(vec![1], vec![-0.9]).unwrap();
        let out = sample_ddim(&prior, &c, &c, 1.0, &z_t, 200, &s, &mut rng(15)).unwrap();
        // independent scalar recurrence with the closed-form Gaussian score
        let mut z = -0.9f64;
        for t in (1..=200).rev() {
            let a = s.alpha_bar(t);
            let ap = s.alpha_bar(t - 1);
            let var = a * sd * sd + 1.0 - a;
            let eps = (1.0 - a).sqrt() * (z - a.sqrt() * mu) / var;
            let x0 = (z - (1.0 - a).sqrt() * eps) / a.sqrt();
            z = ap.sqrt() * x0 + (1.0 - ap).sqrt() * eps;
        }
        assert!((out.data()[0] - z).abs() < 1e-12, "{} vs {z}", out.data()[0]);
        let again = sample_ddim(&prior, &c, &c, 1.0, &z_t, 200, &s, &mut rng(99)).unwrap();
        assert_eq!(out.data(), again.data());
    }
}
