use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Staircase pruning ratio: zero before `t_start`, `ρ·⌊(t − t_start)/t_interval⌋ / n_steps`
/// in between (capped at `ρ`), and `ρ` after `t_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningSchedule {
    pub rho: f64,
    pub n_steps: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub t_interval: usize,
}

impl PruningSchedule {
    pub fn none() -> Self {
        PruningSchedule { rho: 0.0, n_steps: 1, t_start: 0, t_end: 0, t_interval: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("pruning ratio must lie in [0, 1], got {}", self.rho)));
        }
        if self.n_steps == 0 || self.t_interval == 0 {
            return Err(Error::config("n_steps and t_interval must be at least 1"));
        }
        if self.t_start > self.t_end {
            return Err(Error::config("t_start must not exceed t_end"));
        }
        Ok(())
    }

    pub fn rho_at(&self, t: usize) -> f64 {
        if t < self.t_start {
            0.0
        } else if t > self.t_end {
            self.rho
        } else {
            // Step fraction first: it is exactly 1 once saturated, so the cap is exactly ρ.
            let k = ((t - self.t_start) / self.t_interval).min(self.n_steps);
            self.rho * (k as f64 / self.n_steps as f64)
        }
    }

    /// Whether the ratio increases at epoch `t`.
    pub fn is_pruning_epoch(&self, t: usize) -> bool {
        let prev = if t == 0 { 0.0 } else { self.rho_at(t - 1) };
        self.rho_at(t) > prev
    }

    /// First epoch at which the final ratio is in force.
    pub fn saturation_epoch(&self) -> usize {
        if self.rho == 0.0 {
            return 0;
        }
        let ramp = self.t_start + self.n_steps * self.t_interval;
        ramp.min(self.t_end + 1)
    }
}
