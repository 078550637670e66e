//! MSE, PSNR and SSIM.

use crate::error::{Error, Result};
use crate::forward::{Dims, ImageTensor};

/// PSNR reported for identical images and the upper bound for all others.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("image shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a.dims(), b.dims())?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// PSNR in dB from a mean squared error.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of one `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams, g: &[f64]) -> f64 {
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let s_aa = filter_valid(&aa, h, w, g);
    let s_bb = filter_valid(&bb, h, w, g);
    let s_ab = filter_valid(&ab, h, w, g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean local SSIM over a Gaussian window, averaged over channels.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, p: &SsimParams) -> Result<f64> {
    check_same(a.dims(), b.dims())?;
    let d = a.dims();
    if p.window == 0 || d.height < p.window || d.width < p.window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            d.height, d.width, p.window, p.window
        )));
    }
    let g = gaussian_window(p.window, p.sigma);
    let hw = d.height * d.width;
    let total: f64 = (0..d.channels)
        .map(|c| {
            let r = c * hw..(c + 1) * hw;
            ssim_plane(&a.data()[r.clone()], &b.data()[r], d.height, d.width, p, &g)
        })
        .sum();
    Ok(total / d.channels as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(name: impl Into<String>, clean: &ImageTensor, test: &ImageTensor) -> Result<Self> {
        let m = mse(clean, test)?;
        Ok(Self {
            name: name.into(),
            mse: m,
            psnr: psnr_from_mse(m, 1.0),
            ssim: ssim(clean, test)?,
        })
    }
}

/// Per-image rows plus their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mean(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            name: "mean".into(),
            mse: sum(|r| r.mse),
            psnr: sum(|r| r.psnr),
            ssim: sum(|r| r.ssim),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,mse,psnr_db,ssim\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
            s.push_str(&format!("{},{:.10e},{:.6},{:.8}\n", r.name, r.mse, r.psnr, r.ssim));
        }
        s
    }
}
