//! Reverse processes for noise removal.
//!
//! Three interchangeable transitions from step `k` to `k - 1`, all driven by a
//! [`ScoreModel`]:
//!
//! * stochastic: `y + d/2 * (1 + 2 s) + sqrt(d) * n`, the Euler-Maruyama step of the
//!   reverse-time SDE;
//! * ode: `y + d/2 * (1 + s)`, the probability-flow counterpart;
//! * ddim: project to `y0_hat = y + eta/2 + eta * s`, then re-noise onto the step
//!   `k - 1` marginal through the non-Markov kernel parameterized by `zeta_k`.
//!
//! Here `d = eta(k) - eta(k-1)` and `s` is the score at `(y, k)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::forward::{ImageTensor, LogImage};
use crate::rng::RandomSource;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

/// Slack allowed when checking `zeta^2 <= eta(k-1)` so that `zeta = sqrt(eta(k-1))`
/// is accepted despite rounding.
const ZETA_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Stochastic,
    Ode,
    Ddim,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ode, Method::Ddim, Method::Stochastic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Stochastic => "stochastic",
            Method::Ode => "ode",
            Method::Ddim => "ddim",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Method::Stochastic),
            "ode" => Ok(Method::Ode),
            "ddim" => Ok(Method::Ddim),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling method {other:?} (expected ode, ddim or stochastic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    /// `zeta[k]` is the DDIM noise scale used when leaving step `k`; index 0 is unused.
    pub zeta: Vec<f64>,
    /// DDIM step stride; 1 visits every step.
    pub ddim_stride: usize,
}

impl SamplerConfig {
    pub fn new(method: Method, schedule: &NoiseSchedule) -> Self {
        Self {
            method,
            zeta: vec![0.0; schedule.steps() + 1],
            ddim_stride: 1,
        }
    }

    /// Sets `zeta_k^2 = fraction * eta(k - 1)`, the largest admissible family scaled down.
    pub fn with_zeta_fraction(mut self, fraction: f64, schedule: &NoiseSchedule) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "zeta fraction must lie in [0, 1], got {fraction}"
            )));
        }
        self.zeta = (0..=schedule.steps())
            .map(|k| {
                if k == 0 {
                    0.0
                } else {
                    (fraction * schedule.as_slice()[k - 1]).sqrt()
                }
            })
            .collect();
        Ok(self)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("DDIM stride must be at least 1".into()));
        }
        self.ddim_stride = stride;
        Ok(self)
    }

    pub fn zeta_at(&self, k: usize) -> f64 {
        self.zeta.get(k).copied().unwrap_or(0.0)
    }

    /// Transitions `(k, k_prev)` visited when running from `k_start` down to 0.
    pub fn transitions(&self, k_start: usize) -> Vec<(usize, usize)> {
        let stride = match self.method {
            Method::Ddim => self.ddim_stride.max(1),
            _ => 1,
        };
        let mut out = Vec::with_capacity(k_start / stride + 1);
        let mut k = k_start;
        while k > 0 {
            let prev = k.saturating_sub(stride);
            out.push((k, prev));
            k = prev;
        }
        out
    }
}

/// Mean and isotropic variance of the DDIM transition `q(y_{k'} | y_k, y0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimKernel {
    pub mu: Vec<f64>,
    pub var: f64,
}

fn check_step(k: usize, schedule: &NoiseSchedule) -> Result<()> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::Index {
            index: k,
            max: schedule.steps(),
        });
    }
    Ok(())
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            op,
            detail: format!("expected {expected} values, got {got}"),
        });
    }
    Ok(())
}

/// `y + delta/2 * (1 + 2 s) + sqrt(delta) * n`.
pub fn stochastic_update(y: &[f64], score: &[f64], delta: f64, noise: &[f64]) -> Vec<f64> {
    let half = 0.5 * delta;
    let sd = delta.sqrt();
    y.iter()
        .zip(score)
        .zip(noise)
        .map(|((&y, &s), &n)| y + half * (1.0 + 2.0 * s) + sd * n)
        .collect()
}

/// `y + delta/2 * (1 + s)`.
pub fn ode_update(y: &[f64], score: &[f64], delta: f64) -> Vec<f64> {
    let half = 0.5 * delta;
    y.iter()
        .zip(score)
        .map(|(&y, &s)| y + half * (1.0 + s))
        .collect()
}

/// Single-step estimate of the clean log-image, `y + eta/2 + eta * s`.
pub fn y0_estimate(y: &[f64], score: &[f64], eta: f64) -> Vec<f64> {
    let half = 0.5 * eta;
    y.iter()
        .zip(score)
        .map(|(&y, &s)| y + half + eta * s)
        .collect()
}

/// DDIM transition kernel from step `k` to `k_prev < k` given a clean estimate.
pub fn ddim_kernel(
    y_k: &[f64],
    y0_hat: &[f64],
    k: usize,
    k_prev: usize,
    zeta: f64,
    schedule: &NoiseSchedule,
) -> Result<DdimKernel> {
    check_step(k, schedule)?;
    if k_prev >= k {
        return Err(Error::InvalidArgument(format!(
            "DDIM must move to an earlier step, got {k} -> {k_prev}"
        )));
    }
    check_len("ddim_kernel", y_k.len(), y0_hat.len())?;
    let eta = schedule.eta(k)?;
    let eta_prev = schedule.eta(k_prev)?;
    let zeta_sq = zeta * zeta;
    if !(zeta >= 0.0) || zeta_sq > eta_prev * (1.0 + ZETA_RTOL) {
        return Err(Error::InvalidArgument(format!(
            "zeta at k={k} is {zeta}; zeta^2 must not exceed eta(k-1) = {eta_prev}"
        )));
    }
    let coef = (eta_prev - zeta_sq).max(0.0).sqrt() / eta.sqrt();
    let half = 0.5 * eta;
    let half_prev = 0.5 * eta_prev;
    let mu = y_k
        .iter()
        .zip(y0_hat)
        .map(|(&y, &y0)| y0 - half_prev + coef * (y - y0 + half))
        .collect();
    Ok(DdimKernel { mu, var: zeta_sq })
}

/// One Euler-Maruyama step of the reverse SDE, `k -> k - 1`.
pub fn stochastic_step<M: ScoreModel + ?Sized>(
    y_k: &LogImage,
    k: usize,
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<LogImage> {
    check_step(k, schedule)?;
    let score = model.score(y_k, k)?;
    check_len("stochastic_step", y_k.len(), score.len())?;
    let noise = rng.normal_vec(y_k.len());
    let delta = schedule.increment(k)?;
    Ok(y_k.with_data(stochastic_update(y_k.data(), &score, delta, &noise)))
}

/// One deterministic probability-flow step, `k -> k - 1`.
pub fn ode_step<M: ScoreModel + ?Sized>(
    y_k: &LogImage,
    k: usize,
    model: &M,
    schedule: &NoiseSchedule,
) -> Result<LogImage> {
    check_step(k, schedule)?;
    let score = model.score(y_k, k)?;
    check_len("ode_step", y_k.len(), score.len())?;
    let delta = schedule.increment(k)?;
    Ok(y_k.with_data(ode_update(y_k.data(), &score, delta)))
}

/// Single-step prediction of `y0` from `y_k`; at `k = 0` the state is returned as is.
pub fn predict_y0<M: ScoreModel + ?Sized>(
    y_k: &LogImage,
    k: usize,
    model: &M,
    schedule: &NoiseSchedule,
) -> Result<LogImage> {
    let eta = schedule.eta(k)?;
    if k == 0 {
        return Ok(y_k.clone());
    }
    let score = model.score(y_k, k)?;
    check_len("predict_y0", y_k.len(), score.len())?;
    Ok(y_k.with_data(y0_estimate(y_k.data(), &score, eta)))
}

/// One DDIM step `k -> k - 1`; noise is drawn only when `zeta_k > 0`.
pub fn ddim_step<M: ScoreModel + ?Sized>(
    y_k: &LogImage,
    k: usize,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RandomSource,
) -> Result<LogImage> {
    ddim_step_to(y_k, k, k.saturating_sub(1), model, schedule, cfg.zeta_at(k), rng)
}

/// DDIM transition that may skip steps, `k -> k_prev`.
pub fn ddim_step_to<M: ScoreModel + ?Sized>(
    y_k: &LogImage,
    k: usize,
    k_prev: usize,
    model: &M,
    schedule: &NoiseSchedule,
    zeta: f64,
    rng: &mut RandomSource,
) -> Result<LogImage> {
    check_step(k, schedule)?;
    let score = model.score(y_k, k)?;
    check_len("ddim_step", y_k.len(), score.len())?;
    ddim_from_score(y_k, &score, k, k_prev, schedule, zeta, rng)
}

fn ddim_from_score(
    y_k: &LogImage,
    score: &[f64],
    k: usize,
    k_prev: usize,
    schedule: &NoiseSchedule,
    zeta: f64,
    rng: &mut RandomSource,
) -> Result<LogImage> {
    let y0_hat = y0_estimate(y_k.data(), score, schedule.eta(k)?);
    let kernel = ddim_kernel(y_k.data(), &y0_hat, k, k_prev, zeta, schedule)?;
    let mut out = kernel.mu;
    if zeta > 0.0 {
        for v in out.iter_mut() {
            *v += zeta * rng.normal();
        }
    }
    Ok(y_k.with_data(out))
}

/// Where a reverse pass starts: a physical noise variance or an explicit step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Start {
    Level(f64),
    Step(usize),
}

impl Start {
    pub fn resolve(&self, schedule: &NoiseSchedule) -> Result<usize> {
        match *self {
            Start::Level(v) => schedule.step_for_noise_level(v),
            Start::Step(k) if k > schedule.steps() => Err(Error::StepUnreachable {
                step: k,
                max: schedule.steps(),
            }),
            Start::Step(k) => Ok(k),
        }
    }
}

/// Runs the configured reverse process on log-domain states from `k_start` down to 0.
///
/// All states advance together so that network models can evaluate one batch per
/// step. Noise for the stochastic methods is drawn state by state in input order.
pub fn reverse_pass<M: ScoreModel + ?Sized>(
    states: Vec<LogImage>,
    k_start: usize,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RandomSource,
) -> Result<Vec<LogImage>> {
    if k_start > schedule.steps() {
        return Err(Error::StepUnreachable {
            step: k_start,
            max: schedule.steps(),
        });
    }
    let mut states = states;
    for (k, k_prev) in cfg.transitions(k_start) {
        let ks = vec![k; states.len()];
        let scores = model.score_batch(&states, &ks)?;
        let delta = schedule.eta(k)? - schedule.eta(k_prev)?;
        states = states
            .iter()
            .zip(&scores)
            .map(|(y, s)| {
                check_len("reverse_pass", y.len(), s.len())?;
                Ok(match cfg.method {
                    Method::Stochastic => {
                        let noise = rng.normal_vec(y.len());
                        y.with_data(stochastic_update(y.data(), s, delta, &noise))
                    }
                    Method::Ode => y.with_data(ode_update(y.data(), s, delta)),
                    Method::Ddim => {
                        ddim_from_score(y, s, k, k_prev, schedule, cfg.zeta_at(k), rng)?
                    }
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(states)
}

/// Removes multiplicative noise from a batch of images.
///
/// The output is `exp(y_0)` and is not clamped; clamping to `(0, 1]` happens on export.
pub fn denoise_batch<M: ScoreModel + ?Sized>(
    noisy: &[ImageTensor],
    start: Start,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RandomSource,
) -> Result<Vec<ImageTensor>> {
    let k_start = start.resolve(schedule)?;
    if k_start == 0 {
        return Ok(noisy.to_vec());
    }
    let states = noisy.iter().map(ImageTensor::to_log).collect();
    let out = reverse_pass(states, k_start, model, schedule, cfg, rng)?;
    out.iter()
        .map(|y| {
            let x = y.to_intensity();
            // exp can overflow for a diverging model; report rather than emit inf.
            ImageTensor::new(x.dims(), x.into_data())
        })
        .collect()
}

pub fn denoise<M: ScoreModel + ?Sized>(
    noisy: &ImageTensor,
    start: Start,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RandomSource,
) -> Result<ImageTensor> {
    let mut out = denoise_batch(std::slice::from_ref(noisy), start, model, schedule, cfg, rng)?;
    Ok(out.remove(0))
}
