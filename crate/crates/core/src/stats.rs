//! Small estimators shared by the report builders.

use serde::{Deserialize, Serialize};

/// 97.5% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Sample mean with the half-width of a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_mean_var(mean: f64, var: f64, samples: usize) -> Self {
        Estimate {
            mean,
            half_width: Z95 * (var.max(0.0) / samples as f64).sqrt(),
        }
    }
}

/// Least-squares line `y = intercept + slope x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly).1
}

/// Fits `y ≈ C e^{-rate·s}` on the points with `y > 0`; returns `(C, rate)`.
pub fn exponential_decay_fit(s: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let (xs, ly): (Vec<f64>, Vec<f64>) = s
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(x, v)| (*x, v.ln()))
        .unzip();
    if xs.len() < 2 {
        return None;
    }
    let (c, slope) = linear_fit(&xs, &ly);
    Some((c.exp(), -slope))
}
