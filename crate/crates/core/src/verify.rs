//! Self-contained statistical and analytic checks of the pipeline.
//!
//! Each check uses synthetic data and closed-form references only, so it can run
//! anywhere without a trained model.

use crate::error::Result;
use crate::forward::{corrupt_intensity, corrupt_log, simulate_forward_path, Dims, ImageTensor, LogImage};
use crate::nn::gradcheck::{check_network, check_primitive, Primitive};
use crate::rng::{streams, RandomSource};
use crate::samplers::{ddim_step_to, predict_y0, reverse_pass, Method, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::score::DeltaScore;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte Carlo sample count per statistical check.
    pub samples: usize,
    /// Random seeds per primitive in the gradient check.
    pub grad_seeds: u64,
    /// Negative control: corrupt with the drift sign flipped.
    pub flip_drift: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100_000,
            grad_seeds: 10,
            flip_drift: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    /// The statistic that was compared against `threshold`.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: impl Into<String>, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured.is_finite() && measured <= threshold,
            measured,
            threshold,
            detail,
        }
    }
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

fn scalar_field(n: usize, v: f64) -> LogImage {
    LogImage::filled(Dims::new(1, 1, n), v).expect("finite")
}

fn rng(opts: &VerifyOptions, salt: u64) -> RandomSource {
    RandomSource::new(opts.seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)), streams::VERIFY)
}

/// Mean and variance of closed-form corruption at `k` against `-eta/2` and `eta`,
/// in units of standard errors.
pub fn forward_kernel(opts: &VerifyOptions, k: usize) -> Result<PropertyResult> {
    let s = NoiseSchedule::default();
    let eta = s.eta(k)?;
    let n = opts.samples;
    let mut r = rng(opts, 1);
    let sample = corrupt_log(&scalar_field(n, 0.0), k, &s, &mut r)?;
    let (m, v) = mean_var(sample.y_k.data());
    let se_m = (eta / n as f64).sqrt();
    let se_v = eta * (2.0 / (n as f64 - 1.0)).sqrt();
    let zm = (m + 0.5 * eta).abs() / se_m;
    let zv = (v - eta).abs() / se_v;
    Ok(PropertyResult::new(
        "forward-kernel",
        zm.max(zv),
        5.0,
        format!("k={k}: mean {m:.6} (expect {:.6}, z={zm:.2}), var {v:.6} (expect {eta:.6}, z={zv:.2})", -0.5 * eta),
    ))
}

/// Mean of corrupted intensities stays at `x0` (worst z-score over `ks`).
pub fn martingale(opts: &VerifyOptions, ks: &[usize]) -> Result<PropertyResult> {
    let s = NoiseSchedule::default();
    let x0 = 0.5;
    let n = opts.samples;
    let mut r = rng(opts, 2);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for &k in ks {
        let img = ImageTensor::filled(Dims::new(1, 1, n), x0)?;
        let xs: Vec<f64> = if opts.flip_drift {
            let eta = s.eta(k)?;
            let sd = eta.sqrt();
            (0..n).map(|_| x0 * (0.5 * eta + sd * r.normal()).exp()).collect()
        } else {
            corrupt_intensity(&img, k, &s, &mut r)?.0.into_data()
        };
        let (m, v) = mean_var(&xs);
        let z = (m - x0).abs() / (v / n as f64).sqrt();
        worst = worst.max(z);
        detail.push(format!("k={k}: mean {m:.6} z={z:.2}"));
    }
    Ok(PropertyResult::new("martingale", worst, 5.0, detail.join("; ")))
}

/// KS distance between step-by-step path simulation and the closed form at `k`.
pub fn path_equivalence(opts: &VerifyOptions, k: usize) -> Result<PropertyResult> {
    let s = NoiseSchedule::default();
    let n = opts.samples;
    let y0 = scalar_field(n, -0.3);
    let mut r1 = rng(opts, 3);
    let mut r2 = rng(opts, 4);
    let path = simulate_forward_path(&y0, k, &s, &mut r1)?;
    let closed = corrupt_log(&y0, k, &s, &mut r2)?;
    let d = ks_statistic(path.data(), closed.y_k.data());
    let crit = ks_critical_1pct(n, n);
    Ok(PropertyResult::new(
        "path-closed-form",
        d,
        crit,
        format!("k={k}: KS D={d:.5}, 1% critical {crit:.5}"),
    ))
}

fn random_clean(r: &mut RandomSource, n: usize) -> LogImage {
    let data = (0..n).map(|_| -5.5 * r.uniform()).collect();
    LogImage::new(Dims::new(1, 1, n), data).expect("finite")
}

/// Under the exact score, one-shot prediction and a full deterministic DDIM pass
/// both return `y0` (worst absolute error).
pub fn exact_score_recovery(opts: &VerifyOptions, k_start: usize) -> Result<PropertyResult> {
    let s = NoiseSchedule::default();
    let mut r = rng(opts, 5);
    let y0 = random_clean(&mut r, 256);
    let model = DeltaScore::new(y0.clone(), s.clone());
    let y_k = corrupt_log(&y0, k_start, &s, &mut r)?.y_k;
    let pred = predict_y0(&y_k, k_start, &model, &s)?;
    let cfg = SamplerConfig::new(Method::Ddim, &s);
    let ddim = reverse_pass(vec![y_k], k_start, &model, &s, &cfg, &mut r)?.remove(0);
    let err = |a: &LogImage| {
        a.data()
            .iter()
            .zip(y0.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let (ep, ed) = (err(&pred), err(&ddim));
    Ok(PropertyResult::new(
        "exact-score-recovery",
        ep.max(ed),
        1e-12,
        format!("k_start={k_start}: predict_y0 max err {ep:.3e}, DDIM(zeta=0) max err {ed:.3e}"),
    ))
}

/// One DDIM step from the exact forward marginal at `k` lands on the forward
/// marginal at `k - 1` (worst z-score of mean and variance).
pub fn ddim_marginal(opts: &VerifyOptions, k: usize, zeta_fraction: f64) -> Result<PropertyResult> {
    let s = NoiseSchedule::default();
    let n = opts.samples;
    let y0v = -0.7;
    let y0 = scalar_field(n, y0v);
    let model = DeltaScore::new(y0.clone(), s.clone());
    let mut r = rng(opts, 6 + k as u64);
    let y_k = corrupt_log(&y0, k, &s, &mut r)?.y_k;
    let cfg = SamplerConfig::new(Method::Ddim, &s).with_zeta_fraction(zeta_fraction, &s)?;
    let out = ddim_step_to(&y_k, k, k - 1, &model, &s, cfg.zeta_at(k), &mut r)?;
    let eta_p = s.eta(k - 1)?;
    let (m, v) = mean_var(out.data());
    let zm = (m - (y0v - 0.5 * eta_p)).abs() / (eta_p / n as f64).sqrt();
    let zv = (v - eta_p).abs() / (eta_p * (2.0 / (n as f64 - 1.0)).sqrt());
    Ok(PropertyResult::new(
        format!("ddim-marginal k={k} zeta^2={zeta_fraction}*eta(k-1)"),
        zm.max(zv),
        5.0,
        format!("mean {m:.6} (z={zm:.2}), var {v:.6} vs {eta_p:.6} (z={zv:.2})"),
    ))
}

/// Finite-difference checks of every tape primitive and a small network.
pub fn gradient_checks(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0;
    for p in Primitive::ALL {
        for i in 0..opts.grad_seeds {
            let r = check_primitive(p, opts.seed.wrapping_add(i))?;
            checked += r.checked;
            if r.max_rel_error > worst {
                worst = r.max_rel_error;
                worst_name = p.name().to_string();
            }
        }
    }
    let net = check_network(opts.seed)?;
    checked += net.checked;
    if net.max_rel_error > worst {
        worst = net.max_rel_error;
        worst_name = "network".into();
    }
    Ok(PropertyResult::new(
        "gradient-check",
        worst,
        1e-4,
        format!("{checked} partial derivatives; worst rel. error {worst:.2e} ({worst_name})"),
    ))
}

/// The full suite in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut out = vec![
        forward_kernel(opts, 200)?,
        martingale(opts, &[100, 200, 300])?,
        path_equivalence(opts, 200)?,
        exact_score_recovery(opts, 300)?,
    ];
    for k in [50, 200, 400] {
        for f in [0.0, 0.5] {
            out.push(ddim_marginal(opts, k, f)?);
        }
    }
    out.push(gradient_checks(opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            samples: 20_000,
            grad_seeds: 2,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn ks_statistic_hand_cases() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_statistic(&[1.0, 3.0], &[2.0, 4.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn suite_passes() {
        for r in run_all(&quick()).unwrap() {
            assert!(r.passed, "{}: {} > {} ({})", r.name, r.measured, r.threshold, r.detail);
        }
    }

    #[test]
    fn flipped_drift_breaks_martingale() {
        let opts = VerifyOptions {
            flip_drift: true,
            ..quick()
        };
        let r = martingale(&opts, &[100, 200, 300]).unwrap();
        assert!(!r.passed, "{}", r.detail);
    }
}
