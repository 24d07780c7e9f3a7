use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Discrete variance-preserving schedule. Index 0 is the data itself
/// (`alpha_bar[0] = 1`); indices `1..=horizon` are diffusion steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub horizon: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Reverse-step noise scale (posterior standard deviation).
    pub sigma: Vec<f64>,
    /// Continuous-time step between consecutive indices.
    pub dt: f64,
    /// Purification depth in steps.
    pub t_star: usize,
}

impl DiffusionSchedule {
    /// Linear ramp of `beta` over `horizon` steps.
    pub fn linear(horizon: usize, beta_start: f64, beta_end: f64, t_star: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(contract("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(contract(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
        }
        if t_star > horizon {
            return Err(contract(format!("t* = {t_star} exceeds horizon {horizon}")));
        }
        let mut beta = vec![0.0; horizon + 1];
        let mut alpha_bar = vec![1.0; horizon + 1];
        let mut sigma = vec![0.0; horizon + 1];
        for t in 1..=horizon {
            beta[t] = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (horizon - 1) as f64;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
            sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
        }
        if alpha_bar[horizon] >= 0.01 {
            return Err(contract(format!(
                "alpha_bar at the horizon is {:.4}; the chain does not reach near-pure noise",
                alpha_bar[horizon]
            )));
        }
        Ok(DiffusionSchedule { horizon, beta, alpha_bar, sigma, dt: 1.0 / horizon as f64, t_star })
    }

    /// 1000 steps, beta from 1e-4 to 0.02, purification depth 100 (t* = 0.1
    /// in continuous time).
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02, 100).expect("standard schedule is valid")
    }

    pub fn with_t_star(mut self, t_star: usize) -> Result<Self> {
        if t_star > self.horizon {
            return Err(contract(format!("t* = {t_star} exceeds horizon {}", self.horizon)));
        }
        self.t_star = t_star;
        Ok(self)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.horizon {
            return Err(contract(format!("diffusion time {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    /// Standard deviation of the forward marginal at `t`.
    pub fn noise_std(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }
}
