//! Weight-distribution summaries and Gaussian kernel density curves.

use serde::Serialize;

use crate::error::{Error, Result};

/// Population moments. Kurtosis is excess (Fisher) kurtosis: a normal sample gives 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

pub fn layer_stats(values: &[f64]) -> Result<WeightStats> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 values for weight statistics, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= 0.0 || m2 <= f64::EPSILON * mean * mean {
        return Err(Error::InvalidArgument(
            "constant values: skewness and kurtosis are undefined".into(),
        ));
    }
    Ok(WeightStats {
        count: values.len(),
        mean,
        std: m2.sqrt(),
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// Scott's rule `std * n^(-1/5)`, using the population std.
pub fn scott_bandwidth(values: &[f64]) -> Result<f64> {
    let s = layer_stats(values)?;
    Ok(s.std * (values.len() as f64).powf(-0.2))
}

/// `points` evenly spaced values from `min - 4h` to `max + 4h`.
pub fn kde_grid(values: &[f64], bandwidth: f64, points: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("kde data".into()));
    }
    if points < 2 {
        return Err(Error::InvalidArgument("kde grid needs at least 2 points".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + step * i as f64).collect())
}

/// Gaussian kernel density of `values` evaluated at each grid point.
pub fn kde(values: &[f64], grid: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("kde data".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp())
                .sum::<f64>()
        })
        .collect())
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}
