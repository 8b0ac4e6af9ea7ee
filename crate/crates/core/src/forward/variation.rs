use super::{check_base, check_law, PathEnsemble, PathValues, TimeGrid};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ControlLaw, ModelSpec};

/// Direction `v = u - ū`, both laws evaluated along the base trajectories.
#[derive(Clone, Copy, Debug)]
pub struct Direction<'a> {
    pub u_bar: &'a ControlLaw,
    pub u_alt: &'a ControlLaw,
}

impl Direction<'_> {
    /// Writes `ū(t, x)` to `ubar` and `v(t, x)` to `v`.
    pub fn eval(&self, t: f64, x: &[f64], ubar: &mut [f64], v: &mut [f64]) {
        self.u_bar.eval(t, x, ubar);
        self.u_alt.eval(t, x, v);
        for (vi, bi) in v.iter_mut().zip(ubar.iter()) {
            *vi -= bi;
        }
    }
}

/// Solution `Y` of the first-variation equation, aligned with its base.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstVariationEnsemble {
    pub grid: TimeGrid,
    pub paths: usize,
    pub n: usize,
    pub seed: u64,
    /// `M × (steps+1) × n`, path-major.
    pub values: Vec<f64>,
}

impl FirstVariationEnsemble {
    pub fn value_at(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * (self.grid.steps + 1) + step) * self.n;
        &self.values[at..at + self.n]
    }
}

impl PathValues for FirstVariationEnsemble {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn path_count(&self) -> usize {
        self.paths
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, path: usize, step: usize) -> &[f64] {
        self.value_at(path, step)
    }
}

/// Euler recursion
/// `Y ← Y + dt(D_x b Y + D_u b v) + Σᵢ (D_x σⁱ Y + D_u σⁱ v) ΔWⁱ`
/// with coefficients evaluated at `(X̄, ū)` and the base increments.
pub fn simulate_first_variation(
    model: &ModelSpec,
    base: &PathEnsemble,
    dir: Direction,
) -> Result<FirstVariationEnsemble> {
    check_law(model, dir.u_bar)?;
    check_law(model, dir.u_alt)?;
    check_base(base, dir.u_bar)?;
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let grid = base.grid;
    let stride = (grid.steps + 1) * n;
    let mut values = vec![0.0; base.paths * stride];
    exec::try_for_each_chunk_mut(&mut values, stride * exec::CHUNK, |ci, chunk| {
        let (mut ub, mut v) = (vec![0.0; l], vec![0.0; l]);
        let (mut bx, mut bu) = (vec![0.0; n * n], vec![0.0; n * l]);
        let (mut sx, mut su) = (vec![0.0; d * n * n], vec![0.0; d * n * l]);
        let mut inc = vec![0.0; n];
        for (off, row) in chunk.chunks_mut(stride).enumerate() {
            let path = ci * exec::CHUNK + off;
            for k in 0..grid.steps {
                let x = base.state(path, k);
                let dw = base.increment(path, k);
                dir.eval(grid.time(k), x, &mut ub, &mut v);
                model.drift_dx(x, &ub, &mut bx);
                model.drift_du(x, &ub, &mut bu);
                model.diffusion_dx(x, &ub, &mut sx);
                model.diffusion_du(x, &ub, &mut su);
                let (head, tail) = row.split_at_mut((k + 1) * n);
                let y = &head[k * n..];
                for i in 0..n {
                    let mut drift = 0.0;
                    for j in 0..n {
                        drift += bx[i * n + j] * y[j];
                    }
                    for j in 0..l {
                        drift += bu[i * l + j] * v[j];
                    }
                    let mut noise = 0.0;
                    for c in 0..d {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += sx[c * n * n + i * n + j] * y[j];
                        }
                        for j in 0..l {
                            s += su[c * n * l + i * l + j] * v[j];
                        }
                        noise += s * dw[c];
                    }
                    inc[i] = grid.dt * drift + noise;
                }
                for i in 0..n {
                    tail[i] = y[i] + inc[i];
                }
                if tail[..n].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { path, step: k + 1 });
                }
            }
        }
        Ok(())
    })?;
    Ok(FirstVariationEnsemble {
        grid,
        paths: base.paths,
        n,
        seed: base.seed,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_state;

    #[test]
    fn zero_direction_gives_zero() {
        let model = ModelSpec::cubic1();
        let u = ControlLaw::linear_feedback(model.control_set(), 0.3);
        let grid = TimeGrid::with_horizon(0.01, 1.0).unwrap();
        let base = simulate_state(&model, &u, &[1.0], grid, 50, 2).unwrap();
        let y = simulate_first_variation(&model, &base, Direction { u_bar: &u, u_alt: &u }).unwrap();
        assert!(y.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lq_unit_direction_is_step_response() {
        let model = ModelSpec::lq1();
        let u_bar = ControlLaw::zero(model.control_set(), 1);
        let u_alt = ControlLaw::constant(model.control_set(), 1, vec![1.0]).unwrap();
        let grid = TimeGrid::with_horizon(0.001, 2.0).unwrap();
        let base = simulate_state(&model, &u_bar, &[0.0], grid, 4, 2).unwrap();
        let y = simulate_first_variation(&model, &base, Direction { u_bar: &u_bar, u_alt: &u_alt }).unwrap();
        for k in [1000, 2000] {
            let t = grid.time(k);
            for j in 0..4 {
                assert!((y.value_at(j, k)[0] - (1.0 - (-t).exp())).abs() < 1e-3);
            }
        }
    }
}
