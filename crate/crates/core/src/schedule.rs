//! Variance-preserving discrete noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete schedule over steps `1..=T`.
///
/// `alpha_bar(0)` is fixed to 1 so that a DDIM step landing on `t = 0`
/// returns the clean estimate exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            eta: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.eta)
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas, eta)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, eta: f64) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            betas,
            alpha_bar,
            eta,
        })
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::from_betas(self.betas.clone(), eta)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// DDIM noise scale for the step `t -> t - 1`.
    pub fn ddim_sigma(&self, t: usize) -> f64 {
        self.sigma_between(t, t - 1)
    }

    /// DDIM noise scale for a (possibly strided) step `t -> t_prev`.
    pub fn sigma_between(&self, t: usize, t_prev: usize) -> f64 {
        let a_t = self.alpha_bar[t];
        let a_prev = self.alpha_bar[t_prev];
        if a_t >= a_prev || self.eta == 0.0 {
            return 0.0;
        }
        let s = self.eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
        // Keep the noise-direction coefficient's radicand nonnegative.
        s.min((1.0 - a_prev).max(0.0).sqrt())
    }

    /// Evenly spaced descending sub-grid `t_start = g_0 > g_1 > ... > g_n = 0`
    /// with `n = count` steps, used by the fast sampler of operator
    /// initialisation.
    pub fn strided_grid(&self, t_start: usize, count: usize) -> Vec<usize> {
        let count = count.clamp(1, t_start.max(1));
        let mut grid: Vec<usize> = (0..=count)
            .map(|i| ((t_start as f64) * (count - i) as f64 / count as f64).round() as usize)
            .collect();
        grid.dedup();
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_product() {
        let s = make_schedule(1, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_cumulative_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], 1.0).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn linear_schedule_matches_log_domain_accumulation() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        // independent oracle: sum of log(1 - beta) with betas recomputed here
        let mut log_acc = 0.0f64;
        for i in 0..200 {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 199.0;
            log_acc += (-b).ln_1p();
        }
        let reference = log_acc.exp();
        assert!(((s.alpha_bar(200) - reference) / reference).abs() < 1e-12);
        assert!(s.alpha_bar(200) > 0.0 && s.alpha_bar(200) < s.alpha_bar(1));
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02, 1.0).is_err());
        assert!(make_schedule(10, 0.02, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.02, 1.0).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, 1.0).is_err());
        assert!(make_schedule(10, 1e-4, 0.02, 1.5).is_err());
    }

    #[test]
    fn sigma_examples() {
        let det = make_schedule(50, 1e-4, 0.02, 0.0).unwrap();
        for t in 1..=50 {
            assert_eq!(det.ddim_sigma(t), 0.0);
        }
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], 1.0).unwrap();
        assert_eq!(s.ddim_sigma(1), 0.0);
        let expected = (0.1f64 * 0.2 / 0.28).sqrt();
        assert!((s.ddim_sigma(2) - expected).abs() < 1e-14);
    }

    #[test]
    fn strided_grid_endpoints() {
        let s = make_schedule(200, 1e-4, 0.02, 1.0).unwrap();
        let g = s.strided_grid(150, 60);
        assert_eq!(g.first(), Some(&150));
        assert_eq!(g.last(), Some(&0));
        assert_eq!(g.len(), 61);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.strided_grid(3, 10), vec![3, 2, 1, 0]);
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..300, b0 in 1e-5f64..0.05, span in 0.0f64..0.3, eta in 0.0f64..=1.0) {
            let s = make_schedule(t, b0, b0 + span, eta).unwrap();
            for i in 1..=t {
                prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                let rebuilt = s.alpha_bar(i - 1) * (1.0 - s.beta(i));
                prop_assert!(((rebuilt - s.alpha_bar(i)) / s.alpha_bar(i)).abs() < 1e-12);
                let sig = s.ddim_sigma(i);
                prop_assert!(1.0 - s.alpha_bar(i - 1) - sig * sig >= -1e-12);
            }
        }

        #[test]
        fn sigma_monotone_in_eta(t in 2usize..100, e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = make_schedule(t, 1e-4, 0.02, lo).unwrap();
            let b = make_schedule(t, 1e-4, 0.02, hi).unwrap();
            for i in 1..=t {
                prop_assert!(a.ddim_sigma(i) <= b.ddim_sigma(i));
            }
        }
    }
}
