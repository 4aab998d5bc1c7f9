//! Analytic Gaussian-mixture prior with exact time-`t` noise predictions,
//! plus classifier-free guidance and the clean-estimate formula.
//!
//! Every component is isotropic, `N(mu_k, s^2 I)`, so the forward-noised
//! marginal at step `t` stays a mixture:
//! `sum_k w_k N(sqrt(abar_t) mu_k, (abar_t s^2 + 1 - abar_t) I)`.
//! Its score is available in closed form, which makes this prior a
//! drop-in replacement for a learned noise predictor whose output can be
//! checked exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Latent, Tensor};

pub const UNCONDITIONAL: &str = "unconditional";

/// A named subset of prior components, optionally reweighted.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub label: String,
    pub component_mask: Vec<usize>,
    pub weight_overrides: Option<Vec<f64>>,
}

impl Condition {
    pub fn new(label: impl Into<String>, component_mask: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            component_mask,
            weight_overrides: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weight_overrides = Some(weights);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GmmPrior {
    means: Vec<Tensor>,
    comp_std: f64,
    weights: Vec<f64>,
    conditions: BTreeMap<String, Condition>,
}

/// Standardised noise prediction `eps(z_t, t, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrediction {
    pub eps: Tensor,
}

impl GmmPrior {
    /// Builds a prior; the `"unconditional"` condition covering every
    /// component with the base weights is registered automatically.
    pub fn new(means: Vec<Tensor>, comp_std: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidArgument("prior needs at least one component".into()));
        }
        if means.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} means but {} weights",
                means.len(),
                weights.len()
            )));
        }
        if !(comp_std >= 0.0 && comp_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("component std {comp_std} invalid")));
        }
        check_simplex(&weights)?;
        let shape = means[0].shape().to_vec();
        for m in &means {
            m.ensure_shape(&shape)?;
        }
        let mut prior = Self {
            comp_std,
            weights,
            conditions: BTreeMap::new(),
            means,
        };
        let all = (0..prior.means.len()).collect();
        prior.add_condition(Condition::new(UNCONDITIONAL, all))?;
        Ok(prior)
    }

    /// Equal-weight mixture.
    pub fn uniform(means: Vec<Tensor>, comp_std: f64) -> Result<Self> {
        let n = means.len();
        Self::new(means, comp_std, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn add_condition(&mut self, cond: Condition) -> Result<()> {
        if cond.component_mask.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "condition `{}` selects no components",
                cond.label
            )));
        }
        if let Some(&k) = cond.component_mask.iter().find(|&&k| k >= self.means.len()) {
            return Err(Error::InvalidArgument(format!(
                "condition `{}` references component {k} of {}",
                cond.label,
                self.means.len()
            )));
        }
        if let Some(w) = &cond.weight_overrides {
            if w.len() != cond.component_mask.len() {
                return Err(Error::InvalidArgument(format!(
                    "condition `{}` has {} weights for {} components",
                    cond.label,
                    w.len(),
                    cond.component_mask.len()
                )));
            }
            check_simplex(w)?;
        }
        self.conditions.insert(cond.label.clone(), cond);
        Ok(())
    }

    pub fn condition(&self, label: &str) -> Result<&Condition> {
        self.conditions
            .get(label)
            .ok_or_else(|| Error::UnknownCondition(label.to_string()))
    }

    pub fn conditions(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.values()
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn comp_std(&self) -> f64 {
        self.comp_std
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.means[0].shape()
    }

    /// `(component, weight)` pairs for a condition, renormalised.
    fn active(&self, cond: &Condition) -> Result<Vec<(usize, f64)>> {
        let registered = self.condition(&cond.label)?;
        if registered != cond {
            return Err(Error::UnknownCondition(cond.label.clone()));
        }
        Ok(match &cond.weight_overrides {
            Some(w) => cond.component_mask.iter().copied().zip(w.iter().copied()).collect(),
            None => {
                let total: f64 = cond.component_mask.iter().map(|&k| self.weights[k]).sum();
                cond.component_mask
                    .iter()
                    .map(|&k| {
                        let w = if total > 0.0 {
                            self.weights[k] / total
                        } else {
                            1.0 / cond.component_mask.len() as f64
                        };
                        (k, w)
                    })
                    .collect()
            }
        })
    }

    /// Per-component variance of the time-`t` marginal.
    fn marginal_var(&self, abar: f64) -> f64 {
        abar * self.comp_std * self.comp_std + (1.0 - abar)
    }

    /// Log-responsibilities (unnormalised) and squared distances per active component.
    fn log_terms(&self, z: &Tensor, abar: f64, active: &[(usize, f64)]) -> Vec<f64> {
        let var = self.marginal_var(abar);
        let sa = abar.sqrt();
        active
            .iter()
            .map(|&(k, w)| {
                let d2: f64 = z
                    .data()
                    .iter()
                    .zip(self.means[k].data())
                    .map(|(zi, mi)| {
                        let r = zi - sa * mi;
                        r * r
                    })
                    .sum();
                if w > 0.0 {
                    w.ln() - 0.5 * d2 / var
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Exact log-density of the time-`t` marginal under `cond`.
    pub fn log_density(&self, z_t: &Latent, t: usize, cond: &Condition, s: &NoiseSchedule) -> Result<f64> {
        z_t.ensure_shape(self.latent_shape())?;
        let abar = s.alpha_bar(t);
        let active = self.active(cond)?;
        let var = self.marginal_var(abar);
        let terms = self.log_terms(z_t, abar, &active);
        let d = z_t.len() as f64;
        Ok(log_sum_exp(&terms) - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln())
    }

    /// Exact noise prediction `eps = -sqrt(1 - abar_t) * grad log p_t(z_t | cond)`.
    pub fn exact_epsilon(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Condition,
        s: &NoiseSchedule,
    ) -> Result<NoisePrediction> {
        s.check_step(t)?;
        z_t.ensure_shape(self.latent_shape())?;
        let abar = s.alpha_bar(t);
        let active = self.active(cond)?;
        let var = self.marginal_var(abar);
        let terms = self.log_terms(z_t, abar, &active);
        let lse = log_sum_exp(&terms);
        let sa = abar.sqrt();
        // score = -(z - sqrt(abar) * sum_k r_k mu_k) / var
        let mut mean = vec![0.0; z_t.len()];
        for (&(k, _), &lt) in active.iter().zip(&terms) {
            let r = (lt - lse).exp();
            if r == 0.0 || !r.is_finite() {
                continue;
            }
            for (m, mu) in mean.iter_mut().zip(self.means[k].data()) {
                *m += r * mu;
            }
        }
        let coef = (1.0 - abar).sqrt() / var;
        let eps = z_t
            .data()
            .iter()
            .zip(&mean)
            .map(|(z, m)| coef * (z - sa * m))
            .collect();
        Ok(NoisePrediction {
            eps: Tensor::new(z_t.shape().to_vec(), eps)?,
        })
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Max-shifted log-sum-exp; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Classifier-free guidance: `eps_neg + gamma * (eps_pos - eps_neg)`.
pub fn cfg_combine(eps_neg: &NoisePrediction, eps_pos: &NoisePrediction, gamma: f64) -> Result<NoisePrediction> {
    if !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance weight {gamma} not finite")));
    }
    Ok(NoisePrediction {
        eps: eps_neg.eps.zip_map(&eps_pos.eps, |n, p| n + gamma * (p - n))?,
    })
}

/// Clean estimate `z_{0|t} = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn estimate_x0(z_t: &Latent, eps_hat: &NoisePrediction, t: usize, s: &NoiseSchedule) -> Result<Latent> {
    s.check_step(t)?;
    let abar = s.alpha_bar(t);
    let (a, b) = (1.0 / abar.sqrt(), (1.0 - abar).sqrt() / abar.sqrt());
    z_t.zip_map(&eps_hat.eps, |z, e| a * z - b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn standard_normal_prior_gives_scaled_identity() {
        let s = make_schedule(100, 1e-4, 0.02, 1.0).unwrap();
        let prior = GmmPrior::uniform(vec![t1(&[0.0, 0.0, 0.0])], 1.0).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        let z = t1(&[0.3, -1.2, 2.0]);
        let t = 40;
        let eps = prior.exact_epsilon(&z, t, &c, &s).unwrap();
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        for (e, zi) in eps.eps.data().iter().zip(z.data()) {
            assert!((e - zi * k).abs() < 1e-14);
        }
    }

    #[test]
    fn epsilon_vanishes_at_noisy_mean() {
        let s = make_schedule(100, 1e-4, 0.02, 1.0).unwrap();
        let mu = t1(&[0.2, 0.7]);
        let prior = GmmPrior::uniform(vec![mu.clone()], 0.1).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        let t = 55;
        let z = mu.scale(s.alpha_bar(t).sqrt());
        let eps = prior.exact_epsilon(&z, t, &c, &s).unwrap();
        assert!(eps.eps.norm() < 1e-14);
    }

    #[test]
    fn two_component_matches_finite_differences() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        let prior = GmmPrior::new(vec![t1(&[-1.0]), t1(&[1.0])], 0.2, vec![0.5, 0.5]).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        let t = 100;
        let z = t1(&[0.3]);
        let h = 1e-5;
        let lp = |v: f64| prior.log_density(&t1(&[v]), t, &c, &s).unwrap();
        let score = (lp(0.3 + h) - lp(0.3 - h)) / (2.0 * h);
        let expected = -(1.0 - s.alpha_bar(t)).sqrt() * score;
        let got = prior.exact_epsilon(&z, t, &c, &s).unwrap().eps.data()[0];
        assert!(((got - expected) / expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn degenerate_responsibilities_stay_finite() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        let prior = GmmPrior::uniform(vec![t1(&[-50.0; 4]), t1(&[50.0; 4])], 0.0).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        let eps = prior.exact_epsilon(&t1(&[49.0; 4]), 1, &c, &s).unwrap();
        assert!(eps.eps.is_finite());
    }

    #[test]
    fn conditions_validated() {
        let mut prior = GmmPrior::uniform(vec![t1(&[0.0]), t1(&[1.0])], 0.2).unwrap();
        assert!(prior.add_condition(Condition::new("empty", vec![])).is_err());
        assert!(prior.add_condition(Condition::new("oob", vec![2])).is_err());
        assert!(prior
            .add_condition(Condition::new("w", vec![0, 1]).with_weights(vec![0.7, 0.4]))
            .is_err());
        assert!(prior
            .add_condition(Condition::new("w", vec![0, 1]).with_weights(vec![0.7, 0.3]))
            .is_ok());
        assert!(matches!(prior.condition("nope"), Err(Error::UnknownCondition(_))));
        assert!(GmmPrior::new(vec![t1(&[0.0])], 0.2, vec![0.5]).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = make_schedule(10, 1e-4, 0.02, 1.0).unwrap();
        let prior = GmmPrior::uniform(vec![t1(&[0.0, 1.0])], 0.2).unwrap();
        let c = prior.condition(UNCONDITIONAL).unwrap().clone();
        assert!(prior.exact_epsilon(&t1(&[0.0]), 3, &c, &s).is_err());
        assert!(prior.exact_epsilon(&t1(&[0.0, 0.0]), 0, &c, &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let n = NoisePrediction { eps: t1(&[0.0, 0.0]) };
        let p = NoisePrediction { eps: t1(&[1.0, 1.0]) };
        assert_eq!(cfg_combine(&n, &p, 3.0).unwrap().eps.data(), &[3.0, 3.0]);
        assert_eq!(cfg_combine(&n, &p, 1.0).unwrap(), p);
        assert_eq!(cfg_combine(&n, &p, 0.0).unwrap(), n);
        assert!(cfg_combine(&n, &p, f64::NAN).is_err());
    }

    #[test]
    fn estimate_x0_inverts_forward_noising() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(&[3, 4, 4], &mut rng);
        let e = Tensor::randn(&[3, 4, 4], &mut rng);
        let t = 120;
        let a = s.alpha_bar(t);
        let zt = x0.lincomb(a.sqrt(), &e, (1.0 - a).sqrt()).unwrap();
        let back = estimate_x0(&zt, &NoisePrediction { eps: e.clone() }, t, &s).unwrap();
        assert!(back.distance(&x0).unwrap() < 1e-12);
        let zero = NoisePrediction { eps: Tensor::zeros(&[3, 4, 4]) };
        let plain = estimate_x0(&zt, &zero, t, &s).unwrap();
        assert!(plain.distance(&zt.scale(1.0 / a.sqrt())).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn cfg_is_affine(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            c in proptest::collection::vec(-5.0f64..5.0, 4),
            gamma in -3.0f64..6.0,
        ) {
            let (a, b, c) = (NoisePrediction { eps: t1(&a) }, NoisePrediction { eps: t1(&b) }, NoisePrediction { eps: t1(&c) });
            let lhs = cfg_combine(&a, &b, gamma).unwrap().eps
                .add(&cfg_combine(&a, &c, gamma).unwrap().eps).unwrap()
                .sub(&a.eps).unwrap();
            let bc = NoisePrediction { eps: b.eps.add(&c.eps).unwrap().sub(&a.eps).unwrap() };
            let rhs = cfg_combine(&a, &bc, gamma).unwrap().eps;
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
