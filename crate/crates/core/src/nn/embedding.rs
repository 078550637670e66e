use crate::error::{Error, Result};

/// Sinusoidal step embedding: `[sin(k f_0), cos(k f_0), sin(k f_1), cos(k f_1), ...]`
/// with frequencies `f_i` spaced geometrically from 1 down to 1e-4.
pub fn time_embedding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        let a = k as f64 * f;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}
