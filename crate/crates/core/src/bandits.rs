//! Classical bandit baselines: empirical-mean with forced initialization,
//! UCB with a 1/n bonus, and Gaussian Thompson sampling with a deliberately
//! misspecified uniform-moment prior.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Reward noise variance assumed by the Thompson-sampling conjugate update.
pub const TS_NOISE_VAR: f64 = 0.09;
/// Prior mean and variance matching the first two moments of Unif[0, 1].
pub const TS_PRIOR_MEAN: f64 = 0.5;
pub const TS_PRIOR_VAR: f64 = 1.0 / 12.0;

#[derive(Debug, Clone)]
pub struct BanditState {
    pub counts: Vec<u32>,
    pub sums: Vec<f64>,
    pub posterior_mu: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub step: u32,
}

impl BanditState {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![0; k],
            sums: vec![0.0; k],
            posterior_mu: vec![TS_PRIOR_MEAN; k],
            posterior_var: vec![TS_PRIOR_VAR; k],
            step: 0,
        }
    }

    pub fn empirical_mean(&self, arm: usize) -> f64 {
        if self.counts[arm] == 0 {
            0.0
        } else {
            self.sums[arm] / self.counts[arm] as f64
        }
    }

    /// Record one observation: running statistics plus the conjugate
    /// Gaussian posterior update.
    pub fn update(&mut self, arm: usize, reward: f32) {
        self.counts[arm] += 1;
        self.sums[arm] += reward as f64;
        self.step += 1;
        let var = self.posterior_var[arm];
        let new_var = 1.0 / (1.0 / var + 1.0 / TS_NOISE_VAR);
        self.posterior_mu[arm] =
            new_var * (self.posterior_mu[arm] / var + reward as f64 / TS_NOISE_VAR);
        self.posterior_var[arm] = new_var;
    }

    fn first_unsampled(&self) -> Option<usize> {
        self.counts.iter().position(|&c| c == 0)
    }
}

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy empirical mean after each arm is sampled once.
pub fn emp_select(state: &BanditState, k: usize) -> usize {
    debug_assert_eq!(state.counts.len(), k);
    if let Some(arm) = state.first_unsampled() {
        return arm;
    }
    let means: Vec<f64> = (0..k).map(|a| state.empirical_mean(a)).collect();
    argmax_f64(&means)
}

/// Score μ̂_a + c/n_a; unsampled arms first, lowest-index tie-break.
pub fn ucb_select(state: &BanditState, k: usize, c: f64) -> Result<usize> {
    if c < 0.0 {
        return Err(Error::Config("ucb bonus constant must be >= 0".into()));
    }
    if let Some(arm) = state.first_unsampled() {
        return Ok(arm);
    }
    let scores: Vec<f64> = (0..k)
        .map(|a| state.empirical_mean(a) + c / state.counts[a] as f64)
        .collect();
    Ok(argmax_f64(&scores))
}

/// Sample a mean per arm from its Gaussian posterior; play the argmax.
pub fn ts_select(state: &BanditState, k: usize, rng: &mut impl Rng) -> usize {
    let draws: Vec<f64> = (0..k)
        .map(|a| {
            let z: f64 = rng.sample(StandardNormal);
            state.posterior_mu[a] + state.posterior_var[a].sqrt() * z
        })
        .collect();
    argmax_f64(&draws)
}

/// Conjugate posterior update; see `BanditState::update`.
pub fn ts_update(state: &mut BanditState, arm: usize, reward: f32) {
    state.update(arm, reward);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{bandit_pull, BanditTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn emp_forces_initial_sweep_then_argmax() {
        let mut state = BanditState::new(3);
        for expect in 0..3 {
            let arm = emp_select(&state, 3);
            assert_eq!(arm, expect);
            state.update(arm, 0.0);
        }
        let mut state = BanditState::new(3);
        for (arm, r) in [(0, 0.2f32), (1, 0.9), (2, 0.5)] {
            state.update(arm, r);
        }
        assert_eq!(emp_select(&state, 3), 1);
    }

    #[test]
    fn emp_tie_breaks_low() {
        let mut state = BanditState::new(3);
        for arm in 0..3 {
            state.update(arm, 0.5);
        }
        assert_eq!(emp_select(&state, 3), 0);
    }

    #[test]
    fn ucb_score_formula() {
        // μ̂ = [0.5, 0.4], n = [1, 10], c = 1 → scores [1.5, 0.5]
        let mut state = BanditState::new(2);
        state.update(0, 0.5);
        for _ in 0..10 {
            state.update(1, 0.4);
        }
        assert_eq!(ucb_select(&state, 2, 1.0).unwrap(), 0);
        // c = 0 collapses to the empirical strategy
        assert_eq!(ucb_select(&state, 2, 0.0).unwrap(), emp_select(&state, 2));
        assert!(ucb_select(&state, 2, -1.0).is_err());
    }

    #[test]
    fn ts_conjugate_update_closed_form() {
        let mut state = BanditState::new(1);
        ts_update(&mut state, 0, 0.8);
        // posterior_var' = 1/(1/(1/12) + 1/0.09) = 1/(12 + 100/9)
        let expect_var = 1.0 / (12.0 + 1.0 / 0.09);
        assert!((state.posterior_var[0] - expect_var).abs() < 1e-9);
        let expect_mu = expect_var * (0.5 / (1.0 / 12.0) + 0.8f32 as f64 / 0.09);
        assert!((state.posterior_mu[0] - expect_mu).abs() < 1e-9);
        assert!((expect_mu - 0.6442).abs() < 1e-3);
        assert!((expect_var - 0.04327).abs() < 1e-4);
    }

    #[test]
    fn ts_posterior_variance_strictly_decreases() {
        let mut state = BanditState::new(1);
        let mut prev = state.posterior_var[0];
        for _ in 0..20 {
            ts_update(&mut state, 0, 0.3);
            assert!(state.posterior_var[0] < prev);
            prev = state.posterior_var[0];
        }
    }

    #[test]
    fn ts_degenerate_posterior_is_argmax() {
        let mut state = BanditState::new(3);
        state.posterior_mu = vec![0.1, 0.9, 0.4];
        state.posterior_var = vec![0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(ts_select(&state, 3, &mut rng), 1);
        }
    }

    #[test]
    fn selectors_return_valid_arms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = BanditState::new(5);
        for _ in 0..200 {
            let a = emp_select(&state, 5);
            let b = ucb_select(&state, 5, 1.0).unwrap();
            let c = ts_select(&state, 5, &mut rng);
            assert!(a < 5 && b < 5 && c < 5);
            let r: f32 = rng.gen();
            state.update(a, r);
        }
    }

    #[test]
    fn exploration_methods_find_the_good_arm() {
        // 2-arm task with means (0.9, 0.1): both UCB and TS should pull the
        // best arm at least 80% of the time over steps 250..500
        let task = BanditTask::new(vec![0.9, 0.1], 0.3);
        let mut ucb_good = 0usize;
        let mut ts_good = 0usize;
        let mut total = 0usize;
        for seedv in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seedv);
            let mut ucb_state = BanditState::new(2);
            let mut ts_state = BanditState::new(2);
            for step in 0..500 {
                let ua = ucb_select(&ucb_state, 2, 1.0).unwrap();
                ucb_state.update(ua, bandit_pull(&task, ua, &mut rng).unwrap());
                let ta = ts_select(&ts_state, 2, &mut rng);
                ts_state.update(ta, bandit_pull(&task, ta, &mut rng).unwrap());
                if step >= 250 {
                    total += 1;
                    ucb_good += (ua == 0) as usize;
                    ts_good += (ta == 0) as usize;
                }
            }
        }
        let ucb_frac = ucb_good as f64 / total as f64;
        let ts_frac = ts_good as f64 / total as f64;
        assert!(ucb_frac >= 0.8, "ucb best-arm fraction {ucb_frac}");
        assert!(ts_frac >= 0.8, "ts best-arm fraction {ts_frac}");
    }
}
