use serde::{Deserialize, Serialize};

use super::{check_base, check_law, PathEnsemble, PathValues, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::model::{ControlLaw, ModelSpec};

/// A forcing process on `[start, end)`, zero elsewhere. Values depend only on
/// the base state at the same step, so the forcing is adapted by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing {
    Zero,
    Constant {
        value: Vec<f64>,
        start: f64,
        end: f64,
    },
    /// `matrix · X̄_t + offset` with an `n×n` row-major matrix.
    AffineFeedback {
        matrix: Vec<f64>,
        offset: Vec<f64>,
        start: f64,
        end: f64,
    },
}

impl Forcing {
    pub fn constant(value: Vec<f64>, start: f64, end: f64) -> Self {
        Forcing::Constant { value, start, end }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok = match self {
            Forcing::Zero => true,
            Forcing::Constant { value, start, end } => value.len() == n && start <= end,
            Forcing::AffineFeedback {
                matrix,
                offset,
                start,
                end,
            } => matrix.len() == n * n && offset.len() == n && start <= end,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("forcing", format!("shape must be {n} with start <= end")))
        }
    }

    /// Right end of the support (`0` for the zero forcing).
    pub fn support_end(&self) -> f64 {
        match self {
            Forcing::Zero => 0.0,
            Forcing::Constant { end, .. } | Forcing::AffineFeedback { end, .. } => *end,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Forcing::Zero)
    }

    /// Writes the forcing at time `t` given the base state `x`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match self {
            Forcing::Zero => {}
            Forcing::Constant { value, start, end } => {
                if *start <= t && t < *end {
                    out.copy_from_slice(value);
                }
            }
            Forcing::AffineFeedback {
                matrix,
                offset,
                start,
                end,
            } => {
                if *start <= t && t < *end {
                    let n = out.len();
                    for i in 0..n {
                        out[i] = offset[i]
                            + (0..n).map(|j| matrix[i * n + j] * x[j]).sum::<f64>();
                    }
                }
            }
        }
    }

    pub fn id(&self) -> String {
        serde_json::to_string(self).expect("forcing serializes")
    }
}

/// Initial value `η` of the dual process at `t0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Zero,
    Constant { value: Vec<f64> },
    /// `η = X̄_{t0}` pathwise.
    State,
    /// One vector per path, `M × n` row-major.
    PerPath { values: Vec<f64> },
}

impl InitialCondition {
    pub fn eval(&self, base: &PathEnsemble, path: usize, step: usize, out: &mut [f64]) {
        let n = out.len();
        match self {
            InitialCondition::Zero => out.fill(0.0),
            InitialCondition::Constant { value } => out.copy_from_slice(value),
            InitialCondition::State => out.copy_from_slice(base.state(path, step)),
            InitialCondition::PerPath { values } => {
                out.copy_from_slice(&values[path * n..(path + 1) * n])
            }
        }
    }

    pub fn validate(&self, n: usize, paths: usize) -> Result<()> {
        let ok = match self {
            InitialCondition::Zero | InitialCondition::State => true,
            InitialCondition::Constant { value } => value.len() == n,
            InitialCondition::PerPath { values } => values.len() == n * paths,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("eta", "initial condition has the wrong shape"))
        }
    }

    pub fn id(&self) -> String {
        match self {
            InitialCondition::PerPath { .. } => "per_path".into(),
            other => serde_json::to_string(other).expect("eta serializes"),
        }
    }
}

/// Solution of the affine dual equation
/// `d𝒴 = (Λ𝒴 + γ)dt + Σᵢ(Γⁱ𝒴 + ρⁱ)dWⁱ`, `𝒴_{t0} = η`,
/// with `Λ = D_x b(X̄, ū)` and `Γⁱ = D_x σⁱ(X̄, ū)`. Values before `t0` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEnsemble {
    pub grid: TimeGrid,
    pub paths: usize,
    pub n: usize,
    pub seed: u64,
    pub start_step: usize,
    pub eta: InitialCondition,
    pub gamma: Forcing,
    pub rho: Vec<Forcing>,
    pub values: Vec<f64>,
}

impl DualEnsemble {
    pub fn value_at(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * (self.grid.steps + 1) + step) * self.n;
        &self.values[at..at + self.n]
    }
}

impl PathValues for DualEnsemble {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn path_count(&self) -> usize {
        self.paths
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn first_step(&self) -> usize {
        self.start_step
    }
    fn value(&self, path: usize, step: usize) -> &[f64] {
        self.value_at(path, step)
    }
}

/// Simulates the affine dual equation from `t0` on the base increments.
pub fn simulate_affine_dual(
    model: &ModelSpec,
    base: &PathEnsemble,
    u_bar: &ControlLaw,
    t0: f64,
    eta: InitialCondition,
    gamma: Forcing,
    rho: Vec<Forcing>,
) -> Result<DualEnsemble> {
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    check_law(model, u_bar)?;
    check_base(base, u_bar)?;
    let grid = base.grid;
    let start = grid.step_of(t0)?;
    eta.validate(n, base.paths)?;
    gamma.validate(n)?;
    if rho.len() != d {
        return Err(Error::Shape {
            what: "rho".into(),
            expected: d,
            got: rho.len(),
        });
    }
    for r in &rho {
        r.validate(n)?;
    }
    let stride = (grid.steps + 1) * n;
    let mut values = vec![0.0; base.paths * stride];
    exec::try_for_each_chunk_mut(&mut values, stride * exec::CHUNK, |ci, chunk| {
        let mut ub = vec![0.0; l];
        let mut bx = vec![0.0; n * n];
        let mut sx = vec![0.0; d * n * n];
        let (mut g, mut r) = (vec![0.0; n], vec![0.0; n]);
        let mut inc = vec![0.0; n];
        for (off, row) in chunk.chunks_mut(stride).enumerate() {
            let path = ci * exec::CHUNK + off;
            eta.eval(base, path, start, &mut row[start * n..(start + 1) * n]);
            for k in start..grid.steps {
                let t = grid.time(k);
                let x = base.state(path, k);
                let dw = base.increment(path, k);
                u_bar.eval(t, x, &mut ub);
                model.drift_dx(x, &ub, &mut bx);
                model.diffusion_dx(x, &ub, &mut sx);
                gamma.eval(t, x, &mut g);
                let (head, tail) = row.split_at_mut((k + 1) * n);
                let y = &head[k * n..];
                for i in 0..n {
                    let lam: f64 = (0..n).map(|j| bx[i * n + j] * y[j]).sum();
                    inc[i] = grid.dt * (lam + g[i]);
                }
                for (c, rc) in rho.iter().enumerate() {
                    rc.eval(t, x, &mut r);
                    for i in 0..n {
                        let gam: f64 = (0..n).map(|j| sx[c * n * n + i * n + j] * y[j]).sum();
                        inc[i] += (gam + r[i]) * dw[c];
                    }
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
    Ok(DualEnsemble {
        grid,
        paths: base.paths,
        n,
        seed: base.seed,
        start_step: start,
        eta,
        gamma,
        rho,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_state, TimeGrid};

    fn base(model: &ModelSpec, u: &ControlLaw, dt: f64, t: f64, m: usize) -> PathEnsemble {
        simulate_state(model, u, &[1.0], TimeGrid::with_horizon(dt, t).unwrap(), m, 11).unwrap()
    }

    #[test]
    fn all_zero_data_gives_zero() {
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let b = base(&model, &u, 0.01, 1.0, 20);
        let y = simulate_affine_dual(&model, &b, &u, 0.0, InitialCondition::Zero, Forcing::Zero, vec![Forcing::Zero])
            .unwrap();
        assert!(y.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_initial_value_decays() {
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let b = base(&model, &u, 0.001, 2.0, 3);
        let eta = InitialCondition::Constant { value: vec![1.0] };
        let y = simulate_affine_dual(&model, &b, &u, 0.0, eta, Forcing::Zero, vec![Forcing::Zero]).unwrap();
        assert!((y.value_at(2, 1000)[0] - (-1.0f64).exp()).abs() < 1e-3);
        assert!((y.value_at(0, 2000)[0] - (-2.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn noise_forcing_second_moment_matches_closed_form() {
        // 𝒴_2 = e^{-2} + ∫_0^1 e^{-(2-s)} dW_s, so E𝒴_2² = e^{-4} + (e^{-2} - e^{-4})/2.
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let m = 20_000;
        let b = base(&model, &u, 0.01, 2.0, m);
        let eta = InitialCondition::Constant { value: vec![1.0] };
        let rho = vec![Forcing::constant(vec![1.0], 0.0, 1.0)];
        let y = simulate_affine_dual(&model, &b, &u, 0.0, eta, Forcing::Zero, rho).unwrap();
        let m2 = (0..m).map(|j| y.value_at(j, 200)[0].powi(2)).sum::<f64>() / m as f64;
        let exact = (-4.0f64).exp() + ((-2.0f64).exp() - (-4.0f64).exp()) / 2.0;
        assert!((m2 - exact).abs() / exact < 0.05, "{m2} vs {exact}");
    }

    #[test]
    fn starts_at_t0() {
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let b = base(&model, &u, 0.01, 1.0, 5);
        let y = simulate_affine_dual(&model, &b, &u, 0.5, InitialCondition::State, Forcing::Zero, vec![Forcing::Zero])
            .unwrap();
        assert_eq!(y.value_at(1, 49)[0], 0.0);
        assert_eq!(y.value_at(1, 50), b.state(1, 50));
        assert!(simulate_affine_dual(&model, &b, &u, 0.505, InitialCondition::Zero, Forcing::Zero, vec![Forcing::Zero]).is_err());
    }
}
