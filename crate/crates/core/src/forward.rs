//! Multiplicative corruption process.
//!
//! In intensity space the noise is driftless geometric Brownian motion,
//! `x_k = x_0 * exp(-eta(k)/2 + sqrt(eta(k)) * n)`. In the log domain this is a
//! Gaussian kernel, `y_k = y_0 - eta(k)/2 + sqrt(eta(k)) * n`, which is what all
//! closed-form operations below evaluate.

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::schedule::NoiseSchedule;

/// Channel-major image geometry `[C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    dims.check()?;
    if dims.len() != len {
        return Err(Error::Shape {
            op: "image",
            detail: format!(
                "{}x{}x{} needs {} samples, got {}",
                dims.channels,
                dims.height,
                dims.width,
                dims.len(),
                len
            ),
        });
    }
    Ok(())
}

/// Strictly positive intensity field.
///
/// Clean images live in `(0, 1]`; corrupted intensities may exceed 1 and are
/// only clamped when exported (see [`ImageTensor::is_unit_range`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    dims: Dims,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!(
                "intensity at index {i} is {v}; intensities must be finite and strictly positive"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v <= 1.0)
    }

    pub fn to_log(&self) -> LogImage {
        LogImage {
            dims: self.dims,
            data: self.data.iter().map(|v| v.ln()).collect(),
        }
    }
}

/// Elementwise logarithm of an intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct LogImage {
    dims: Dims,
    data: Vec<f64>,
}

impl LogImage {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "log-domain value at index {i} is not finite"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_intensity(&self) -> ImageTensor {
        ImageTensor {
            dims: self.dims,
            data: self.data.iter().map(|v| v.exp()).collect(),
        }
    }

    /// Builds a same-shaped image from raw values, skipping the finiteness scan.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> LogImage {
        debug_assert_eq!(data.len(), self.data.len());
        LogImage {
            dims: self.dims,
            data,
        }
    }
}

/// A corrupted state together with the Gaussian draw that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample {
    pub y_k: LogImage,
    pub noise: Vec<f64>,
    pub k: usize,
    /// Multiplicative factor `exp(-eta/2 + sqrt(eta) * n)` applied in intensity space.
    pub factor: Vec<f64>,
}

/// Closed-form log-domain corruption with a caller-supplied standard normal draw.
pub fn corrupt_log_with_noise(
    y0: &LogImage,
    k: usize,
    schedule: &NoiseSchedule,
    noise: Vec<f64>,
) -> Result<ForwardSample> {
    let eta = schedule.eta(k)?;
    if noise.len() != y0.len() {
        return Err(Error::Shape {
            op: "corrupt_log",
            detail: format!("noise has {} entries, image {}", noise.len(), y0.len()),
        });
    }
    let half = 0.5 * eta;
    let sd = eta.sqrt();
    let y_k = y0
        .data()
        .iter()
        .zip(&noise)
        .map(|(&y, &n)| y - half + sd * n)
        .collect();
    let factor = noise.iter().map(|&n| (-half + sd * n).exp()).collect();
    Ok(ForwardSample {
        y_k: y0.with_data(y_k),
        noise,
        k,
        factor,
    })
}

/// Draws `n ~ N(0, I)` and corrupts `y0` to step `k` in one shot.
pub fn corrupt_log(
    y0: &LogImage,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<ForwardSample> {
    schedule.eta(k)?;
    let noise = rng.normal_vec(y0.len());
    corrupt_log_with_noise(y0, k, schedule, noise)
}

/// Intensity-space corruption; the result is `exp` of the log-domain state, unclamped.
pub fn corrupt_intensity(
    x0: &ImageTensor,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<(ImageTensor, ForwardSample)> {
    schedule.eta(k)?;
    let sample = corrupt_log(&x0.to_log(), k, schedule, rng)?;
    Ok((sample.y_k.to_intensity(), sample))
}

pub fn corrupt_intensity_with_noise(
    x0: &ImageTensor,
    k: usize,
    schedule: &NoiseSchedule,
    noise: Vec<f64>,
) -> Result<(ImageTensor, ForwardSample)> {
    let sample = corrupt_log_with_noise(&x0.to_log(), k, schedule, noise)?;
    Ok((sample.y_k.to_intensity(), sample))
}

/// Runs the per-step Euler-Maruyama recursion
/// `y_j = y_{j-1} - d_j/2 + sqrt(d_j) * n_j` for `j = 1..=k`.
///
/// Used as an independent check on [`corrupt_log`].
pub fn simulate_forward_path(
    y0: &LogImage,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<LogImage> {
    simulate_forward_path_with(y0, k, schedule, |_, buf| rng.fill_normal(buf))
}

/// Path recursion with injected per-step noise; `draw(j, buf)` fills the draw for step `j`.
pub fn simulate_forward_path_with<F>(
    y0: &LogImage,
    k: usize,
    schedule: &NoiseSchedule,
    mut draw: F,
) -> Result<LogImage>
where
    F: FnMut(usize, &mut [f64]),
{
    schedule.eta(k)?;
    let mut y = y0.data().to_vec();
    let mut n = vec![0.0; y.len()];
    for j in 1..=k {
        let d = schedule.increment(j)?;
        let half = 0.5 * d;
        let sd = d.sqrt();
        draw(j, &mut n);
        for (yi, ni) in y.iter_mut().zip(&n) {
            *yi += -half + sd * ni;
        }
    }
    Ok(y0.with_data(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn scalar(v: f64) -> LogImage {
        LogImage::new(Dims::new(1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn zero_step_is_identity() {
        let s = NoiseSchedule::default();
        let y0 = LogImage::new(Dims::new(1, 2, 2), vec![-0.1, -0.5, -1.0, -2.0]).unwrap();
        let mut rng = RandomSource::new(0, 0);
        let out = corrupt_log(&y0, 0, &s, &mut rng).unwrap();
        assert_eq!(out.y_k, y0);
        assert_eq!(out.noise.len(), 4);
    }

    #[test]
    fn zero_noise_applies_half_eta_drift() {
        let s = NoiseSchedule::default();
        let y0 = LogImage::new(Dims::new(1, 1, 3), vec![0.0, -1.0, -0.25]).unwrap();
        let out = corrupt_log_with_noise(&y0, 100, &s, vec![0.0; 3]).unwrap();
        for (a, b) in out.y_k.data().iter().zip(y0.data()) {
            assert!((a - (b - 0.02)).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_identity_is_exact() {
        let s = NoiseSchedule::default();
        let y0 = LogImage::new(Dims::new(1, 4, 4), (0..16).map(|i| -(i as f64) * 0.1).collect())
            .unwrap();
        let mut rng = RandomSource::new(3, 3);
        for k in [1, 17, 250, 500] {
            let out = corrupt_log(&y0, k, &s, &mut rng).unwrap();
            let eta = s.eta(k).unwrap();
            for i in 0..16 {
                let expect = y0.data()[i] - 0.5 * eta + eta.sqrt() * out.noise[i];
                assert_eq!(out.y_k.data()[i].to_bits(), expect.to_bits());
                assert!(out.factor[i] > 0.0);
            }
        }
    }

    #[test]
    fn intensity_zero_noise_value() {
        let s = NoiseSchedule::default();
        let x0 = ImageTensor::new(Dims::new(1, 1, 1), vec![1.0]).unwrap();
        let (x, _) = corrupt_intensity_with_noise(&x0, 100, &s, vec![0.0]).unwrap();
        assert!((x.data()[0] - 0.980_198_673_306_755_8).abs() < 1e-15);
    }

    #[test]
    fn intensity_zero_step_keeps_input() {
        let s = NoiseSchedule::default();
        let x0 = ImageTensor::new(Dims::new(1, 1, 4), vec![0.1, 0.5, 0.75, 1.0]).unwrap();
        let mut rng = RandomSource::new(5, 5);
        let (x, _) = corrupt_intensity(&x0, 0, &s, &mut rng).unwrap();
        for (a, b) in x.data().iter().zip(x0.data()) {
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b);
        }
    }

    #[test]
    fn log_and_intensity_commute_bitwise() {
        let s = NoiseSchedule::default();
        let x0 = ImageTensor::new(Dims::new(1, 2, 3), vec![0.2, 0.4, 0.6, 0.8, 0.9, 1.0]).unwrap();
        let mut r1 = RandomSource::new(9, 1);
        let mut r2 = RandomSource::new(9, 1);
        let (x, _) = corrupt_intensity(&x0, 300, &s, &mut r1).unwrap();
        let y = corrupt_log(&x0.to_log(), 300, &s, &mut r2).unwrap();
        for (a, b) in x.data().iter().zip(y.y_k.data()) {
            assert_eq!(a.to_bits(), b.exp().to_bits());
        }
    }

    #[test]
    fn rejects_non_positive_intensity() {
        assert!(matches!(
            ImageTensor::new(Dims::new(1, 1, 2), vec![0.5, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            ImageTensor::new(Dims::new(1, 1, 1), vec![-0.5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn out_of_range_step() {
        let s = NoiseSchedule::default();
        let mut rng = RandomSource::new(0, 0);
        assert!(matches!(
            corrupt_log(&scalar(0.0), 501, &s, &mut rng),
            Err(Error::Index { .. })
        ));
        assert!(simulate_forward_path(&scalar(0.0), 501, &s, &mut rng).is_err());
    }

    #[test]
    fn path_with_zero_noise_accumulates_drift() {
        let s = NoiseSchedule::default();
        let y = simulate_forward_path_with(&scalar(-0.3), 100, &s, |_, b| b.fill(0.0)).unwrap();
        assert!((y.data()[0] - (-0.32)).abs() < 1e-14);
        let mut rng = RandomSource::new(0, 0);
        assert_eq!(
            simulate_forward_path(&scalar(-0.3), 0, &s, &mut rng).unwrap(),
            scalar(-0.3)
        );
    }
}
