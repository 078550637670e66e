//! Discrete noise schedule.
//!
//! The schedule is stored as the cumulative variance ladder `eta[k] = sigma(k) - sigma(0)`
//! for `k = 0..=K`. Every sampler and the training objective consume only this ladder,
//! so non-linear schedules can be added by constructing a different array.

use crate::error::{Error, Result};

/// Relative slack used when matching a physical noise level to a grid value.
const LEVEL_MATCH_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    eta: Vec<f64>,
    eta_per_step: Option<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 500;
    pub const DEFAULT_ETA_PER_STEP: f64 = 0.0004;

    /// Schedule whose cumulative variance grows linearly: `eta[k] = k * eta_per_step`.
    pub fn linear(steps: usize, eta_per_step: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(eta_per_step > 0.0) || !eta_per_step.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta_per_step must be positive and finite, got {eta_per_step}"
            )));
        }
        let eta = (0..=steps).map(|k| k as f64 * eta_per_step).collect();
        Ok(Self {
            eta,
            eta_per_step: Some(eta_per_step),
        })
    }

    /// Schedule with `sigma(k)` linear between `sigma_start` and `sigma_end` over `k = 0..=K`.
    ///
    /// This is the alternative reading of a "linear sigma range"; the resulting cumulative
    /// variance is `eta[k] = (sigma_end - sigma_start) * k / K`.
    pub fn from_sigma_range(steps: usize, sigma_start: f64, sigma_end: f64) -> Result<Self> {
        if !(sigma_end > sigma_start) {
            return Err(Error::InvalidArgument(format!(
                "sigma range must be increasing, got [{sigma_start}, {sigma_end}]"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        Self::linear(steps, (sigma_end - sigma_start) / steps as f64)
    }

    /// Builds a schedule from an explicit cumulative-variance array.
    pub fn from_eta(eta: Vec<f64>) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::InvalidArgument(
                "schedule needs eta[0] plus at least one step".into(),
            ));
        }
        if eta[0] != 0.0 {
            return Err(Error::InvalidArgument(format!("eta[0] must be 0, got {}", eta[0])));
        }
        for k in 1..eta.len() {
            if !eta[k].is_finite() || !(eta[k] > eta[k - 1]) {
                return Err(Error::InvalidArgument(format!(
                    "eta must be strictly increasing; eta[{}]={} after eta[{}]={}",
                    k,
                    eta[k],
                    k - 1,
                    eta[k - 1]
                )));
            }
        }
        Ok(Self {
            eta,
            eta_per_step: None,
        })
    }

    /// Total number of diffusion steps K.
    pub fn steps(&self) -> usize {
        self.eta.len() - 1
    }

    /// Per-step increment for linear schedules.
    pub fn eta_per_step(&self) -> Option<f64> {
        self.eta_per_step
    }

    pub fn eta(&self, k: usize) -> Result<f64> {
        self.eta.get(k).copied().ok_or(Error::Index {
            index: k,
            max: self.steps(),
        })
    }

    /// Variance added by step `k`, `eta[k] - eta[k-1]`.
    pub fn increment(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Index {
                index: 0,
                max: self.steps(),
            });
        }
        Ok(self.eta(k)? - self.eta[k - 1])
    }

    pub fn max_eta(&self) -> f64 {
        self.eta[self.steps()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    /// Smallest step whose cumulative variance reaches `level`.
    pub fn step_for_noise_level(&self, level: f64) -> Result<usize> {
        if !(level >= 0.0) || !level.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise level must be finite and non-negative, got {level}"
            )));
        }
        let target = level * (1.0 - LEVEL_MATCH_RTOL);
        if target > self.max_eta() {
            return Err(Error::LevelUnreachable {
                level,
                max: self.max_eta(),
            });
        }
        Ok(self.eta.partition_point(|&e| e < target))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, Self::DEFAULT_ETA_PER_STEP)
            .expect("default schedule parameters are valid")
    }
}
