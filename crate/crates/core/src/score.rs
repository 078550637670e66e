//! Score-model contract and closed-form score oracles.
//!
//! If the clean log-image is a point mass at `y0`, the step-`k` marginal is
//! `N(y0 - eta/2, eta)` and its score is `-(y - y0 + eta/2) / eta`. If instead
//! `y0 ~ N(mu0, var0)` elementwise, the marginal is `N(mu0 - eta/2, var0 + eta)`.
//! Both are exact, which makes them reference models for the samplers and the
//! training objective.

use crate::error::{Error, Result};
use crate::forward::LogImage;
use crate::schedule::NoiseSchedule;

/// Anything that estimates `grad log p_k(y)` for a log-domain state at step `k`.
pub trait ScoreModel: Sync {
    fn score(&self, y: &LogImage, k: usize) -> Result<Vec<f64>>;

    /// Scores for several states at once; networks override this to batch work.
    fn score_batch(&self, ys: &[LogImage], ks: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ys.len() != ks.len() {
            return Err(Error::Shape {
                op: "score_batch",
                detail: format!("{} states but {} step indices", ys.len(), ks.len()),
            });
        }
        ys.iter().zip(ks).map(|(y, &k)| self.score(y, k)).collect()
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn score(&self, y: &LogImage, k: usize) -> Result<Vec<f64>> {
        (**self).score(y, k)
    }

    fn score_batch(&self, ys: &[LogImage], ks: &[usize]) -> Result<Vec<Vec<f64>>> {
        (**self).score_batch(ys, ks)
    }
}

/// Exact score when the data distribution is a point mass at `y0`.
pub fn analytic_delta_score(
    y: &LogImage,
    k: usize,
    y0: &LogImage,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eta = schedule.eta(k)?;
    if k == 0 || eta <= 0.0 {
        return Err(Error::DegenerateKernel(
            "the score of a point mass is undefined at zero variance (k = 0)".into(),
        ));
    }
    if y.dims() != y0.dims() {
        return Err(Error::Shape {
            op: "analytic_delta_score",
            detail: format!("state {:?} vs clean image {:?}", y.dims(), y0.dims()),
        });
    }
    let half = 0.5 * eta;
    Ok(y
        .data()
        .iter()
        .zip(y0.data())
        .map(|(&yi, &y0i)| -(yi - y0i + half) / eta)
        .collect())
}

/// Exact score when `y0 ~ N(mu0, var0)` independently per element.
///
/// `mu0` and `var0` either match the state's length or have a single entry that is
/// broadcast.
pub fn analytic_gaussian_score(
    y: &LogImage,
    k: usize,
    mu0: &[f64],
    var0: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eta = schedule.eta(k)?;
    let n = y.len();
    for (name, v) in [("mu0", mu0), ("var0", var0)] {
        if v.len() != n && v.len() != 1 {
            return Err(Error::Shape {
                op: "analytic_gaussian_score",
                detail: format!("{name} has {} entries, state has {n}", v.len()),
            });
        }
    }
    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    let half = 0.5 * eta;
    y.data()
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let v0 = at(var0, i);
            if v0 < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "var0[{i}] = {v0} is negative"
                )));
            }
            let var = v0 + eta;
            if var <= 0.0 {
                return Err(Error::DegenerateKernel(format!(
                    "marginal variance is zero at index {i} (k = {k}, var0 = {v0})"
                )));
            }
            Ok(-(yi - at(mu0, i) + half) / var)
        })
        .collect()
}

/// [`analytic_delta_score`] packaged as a [`ScoreModel`].
#[derive(Clone, Debug)]
pub struct DeltaScore {
    pub y0: LogImage,
    pub schedule: NoiseSchedule,
}

impl DeltaScore {
    pub fn new(y0: LogImage, schedule: NoiseSchedule) -> Self {
        Self { y0, schedule }
    }
}

impl ScoreModel for DeltaScore {
    fn score(&self, y: &LogImage, k: usize) -> Result<Vec<f64>> {
        analytic_delta_score(y, k, &self.y0, &self.schedule)
    }
}

/// [`analytic_gaussian_score`] packaged as a [`ScoreModel`].
#[derive(Clone, Debug)]
pub struct GaussianScore {
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl GaussianScore {
    pub fn new(mu0: Vec<f64>, var0: Vec<f64>, schedule: NoiseSchedule) -> Self {
        Self {
            mu0,
            var0,
            schedule,
        }
    }
}

impl ScoreModel for GaussianScore {
    fn score(&self, y: &LogImage, k: usize) -> Result<Vec<f64>> {
        analytic_gaussian_score(y, k, &self.mu0, &self.var0, &self.schedule)
    }
}
