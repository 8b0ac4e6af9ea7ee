use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec;

/// Polynomial features in the per-step standardized state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    pub degree: u32,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            degree: 3,
            ridge: 1e-8,
        }
    }
}

impl RegressionBasis {
    pub fn new(degree: u32, ridge: f64) -> Result<Self> {
        let b = RegressionBasis { degree, ridge };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(invalid("degree", "must be at least 1"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(invalid("ridge", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of monomials of total degree at most `degree` in `n` variables.
    pub fn feature_count(&self, n: usize) -> usize {
        let d = self.degree as usize;
        // binomial(n + d, d)
        (1..=d).fold(1usize, |acc, i| acc * (n + i) / i)
    }

    /// Exponent vectors over the active coordinates, graded by total degree.
    pub fn exponents(&self, active: &[bool]) -> Vec<Vec<u32>> {
        let n = active.len();
        let mut out = Vec::new();
        for total in 0..=self.degree {
            let mut e = vec![0u32; n];
            push_graded(active, 0, total, &mut e, &mut out);
        }
        out
    }
}

fn push_graded(active: &[bool], i: usize, left: u32, e: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if i == active.len() {
        if left == 0 {
            out.push(e.clone());
        }
        return;
    }
    let max = if active[i] { left } else { 0 };
    for k in (0..=max).rev() {
        e[i] = k;
        push_graded(active, i + 1, left - k, e, out);
    }
    e[i] = 0;
}

/// Standardization and monomial list used at one time step.
///
/// Coordinates with (numerically) zero spread across paths are dropped, so
/// the feature set at a deterministic initial state is the constant alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub exponents: Vec<Vec<u32>>,
    degree: u32,
}

impl FeatureMap {
    /// Fits the standardization to `state(path)` over `paths` paths.
    pub fn fit<'a, F>(basis: &RegressionBasis, n: usize, paths: usize, state: F) -> Self
    where
        F: Fn(usize) -> &'a [f64] + Sync + Send,
    {
        let sums = exec::sum_vectors(paths, 2 * n, |r, acc| {
            for j in r {
                let x = state(j);
                for i in 0..n {
                    acc[i] += x[i];
                }
            }
        });
        let mean: Vec<f64> = sums[..n].iter().map(|s| s / paths as f64).collect();
        let ss = exec::sum_vectors(paths, n, |r, acc| {
            for j in r {
                let x = state(j);
                for i in 0..n {
                    acc[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
                }
            }
        });
        let scale: Vec<f64> = ss.iter().map(|s| (s / paths as f64).sqrt()).collect();
        let active: Vec<bool> = scale
            .iter()
            .zip(&mean)
            .map(|(s, m)| *s > 1e-12 * (1.0 + m.abs()))
            .collect();
        let scale = scale
            .iter()
            .zip(&active)
            .map(|(s, a)| if *a { *s } else { 0.0 })
            .collect();
        FeatureMap {
            mean,
            scale,
            exponents: basis.exponents(&active),
            degree: basis.degree,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Scratch length needed by [`FeatureMap::eval`].
    pub fn scratch_len(&self) -> usize {
        self.mean.len() * (self.degree as usize + 1)
    }

    pub fn eval(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let w = self.degree as usize + 1;
        for (i, ((xi, m), s)) in x.iter().zip(&self.mean).zip(&self.scale).enumerate() {
            let z = if *s > 0.0 { (xi - m) / s } else { 0.0 };
            let row = &mut scratch[i * w..(i + 1) * w];
            row[0] = 1.0;
            for e in 1..w {
                row[e] = row[e - 1] * z;
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (i, k) in e.iter().enumerate() {
                if *k > 0 {
                    v *= scratch[i * w + *k as usize];
                }
            }
            *o = v;
        }
    }

    /// `Σ_f φ_f(x) coef[f·width + c]` for every output column `c`.
    pub fn predict(&self, phi: &[f64], coef: &[f64], out: &mut [f64]) {
        let width = out.len();
        out.fill(0.0);
        for (f, p) in phi.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += p * coef[f * width + c];
            }
        }
    }
}

/// Cholesky factor of `FᵀF + λI`, reused for several right-hand sides.
pub(crate) struct NormalEquations {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    size: usize,
}

impl NormalEquations {
    pub fn new(gram: &[f64], size: usize, ridge: f64, step: usize) -> Result<Self> {
        let mut g = DMatrix::from_row_slice(size, size, gram);
        for i in 0..size {
            g[(i, i)] += ridge;
        }
        let chol = g.cholesky().ok_or_else(|| Error::Regression {
            step,
            reason: "feature Gram matrix is not positive definite".into(),
        })?;
        Ok(NormalEquations { chol, size })
    }

    /// Solves for a `size × width` row-major coefficient block.
    pub fn solve(&self, rhs: &[f64], width: usize, step: usize) -> Result<Vec<f64>> {
        let b = DMatrix::from_row_slice(self.size, width, rhs);
        let x = self.chol.solve(&b);
        let mut out = vec![0.0; self.size * width];
        for f in 0..self.size {
            for c in 0..width {
                out[f * width + c] = x[(f, c)];
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                step,
                reason: "non-finite coefficients".into(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_binomials() {
        let b = RegressionBasis::default();
        assert_eq!(b.feature_count(1), 4);
        assert_eq!(b.feature_count(2), 10);
        assert_eq!(b.exponents(&[true, true]).len(), 10);
        assert_eq!(b.exponents(&[true, false]).len(), 4);
        assert_eq!(b.exponents(&[true, true])[0], vec![0, 0]);
    }

    #[test]
    fn degenerate_coordinates_are_dropped() {
        let b = RegressionBasis::default();
        let xs = [[1.0, 0.5], [2.0, 0.5], [4.0, 0.5]];
        let fm = FeatureMap::fit(&b, 2, 3, |j| &xs[j][..]);
        assert_eq!(fm.len(), 4);
        assert_eq!(fm.scale[1], 0.0);
        let mut scratch = vec![0.0; fm.scratch_len()];
        let mut phi = vec![0.0; fm.len()];
        fm.eval(&xs[0], &mut scratch, &mut phi);
        assert_eq!(phi[0], 1.0);
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let b = RegressionBasis::new(3, 0.0).unwrap();
        let xs: Vec<[f64; 1]> = (0..50).map(|i| [i as f64 / 10.0 - 2.5]).collect();
        let fm = FeatureMap::fit(&b, 1, xs.len(), |j| &xs[j][..]);
        let p = fm.len();
        let (mut gram, mut rhs) = (vec![0.0; p * p], vec![0.0; p]);
        let mut scratch = vec![0.0; fm.scratch_len()];
        let mut phi = vec![0.0; p];
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        for x in &xs {
            fm.eval(x, &mut scratch, &mut phi);
            for a in 0..p {
                rhs[a] += phi[a] * f(x[0]);
                for c in 0..p {
                    gram[a * p + c] += phi[a] * phi[c];
                }
            }
        }
        let ne = NormalEquations::new(&gram, p, 0.0, 0).unwrap();
        let coef = ne.solve(&rhs, 1, 0).unwrap();
        let mut out = [0.0];
        fm.eval(&[0.7], &mut scratch, &mut phi);
        fm.predict(&phi, &coef, &mut out);
        assert!((out[0] - f(0.7)).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(RegressionBasis::new(0, 1e-8).is_err());
        assert!(RegressionBasis::new(2, -1.0).is_err());
    }
}
