//! Backward regression solver for the adjoint BSDE
//!
//! `-dp = (Λᵀp + Σᵢ Γⁱᵀqⁱ + Ψ) dt - Σᵢ qⁱ dWⁱ`, `p_T = ν`,
//! with `Λ = D_x b`, `Γⁱ = D_x σⁱ`, `Ψ = D_x f` evaluated along `(X̄, ū)`.
//!
//! Each step regresses on polynomial features of `X̄_k`:
//! `qⁱ_k` is fitted to `(p_{k+1} - Ê[p_{k+1} | X̄_k]) ΔWⁱ_k / dt`, then `p_k`
//! to `p_{k+1} + dt(Λᵀp_{k+1} + Σᵢ Γⁱᵀqⁱ_k + Ψ_k)`. Subtracting the
//! conditional mean before multiplying by the increment leaves the same
//! regression target in expectation but removes most of its variance.

mod basis;
mod export;
pub(crate) mod ladder;

pub use basis::{FeatureMap, RegressionBasis};
pub use export::write_pathwise_csv;
pub use ladder::{check_truncation_consistency, extend_to_infinite, ConsistencyReport, InfiniteAdjoint};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec;
use crate::forward::{check_base, check_law, PathEnsemble, TimeGrid};
use crate::model::{ControlLaw, ModelSpec};
use basis::NormalEquations;

/// Terminal condition `ν` of a truncated problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terminal {
    Zero,
    Constant { value: Vec<f64> },
    /// `M × n` row-major, one vector per path.
    PerPath { values: Vec<f64> },
}

impl Terminal {
    pub fn id(&self) -> String {
        match self {
            Terminal::Zero => "zero".into(),
            Terminal::Constant { value } => format!("constant{value:?}"),
            Terminal::PerPath { .. } => "per_path".into(),
        }
    }

    fn validate(&self, n: usize, paths: usize) -> Result<()> {
        let ok = match self {
            Terminal::Zero => true,
            Terminal::Constant { value } => value.len() == n,
            Terminal::PerPath { values } => values.len() == n * paths,
        };
        if ok && self.values().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(invalid("nu", "terminal condition has the wrong shape or non-finite values"))
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Terminal::Zero => &[],
            Terminal::Constant { value } => value,
            Terminal::PerPath { values } => values,
        }
    }

    fn eval(&self, path: usize, out: &mut [f64]) {
        let n = out.len();
        match self {
            Terminal::Zero => out.fill(0.0),
            Terminal::Constant { value } => out.copy_from_slice(value),
            Terminal::PerPath { values } => out.copy_from_slice(&values[path * n..(path + 1) * n]),
        }
    }
}

/// Regression representation of `(p_k, q_k)` at one grid step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub features: FeatureMap,
    /// `features × n`, row-major.
    pub p_coef: Vec<f64>,
    /// `features × (d·n)`, row-major; column `i·n + r` is component `r` of `qⁱ`.
    pub q_coef: Vec<f64>,
    /// Mean squared residual of `p_{k+1}` about its fitted conditional mean.
    pub p_residual_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointSolution {
    pub grid: TimeGrid,
    pub paths: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub control_id: String,
    pub basis: RegressionBasis,
    pub terminal: Terminal,
    /// Fits for steps `0..steps`; step `steps` carries `ν`.
    pub steps: Vec<StepFit>,
    /// `Ê|p_k|²` for `k = 0..=steps`.
    pub p_second_moment: Vec<f64>,
    pub sup_p_second_moment: f64,
}

/// Reusable buffers for evaluating a solution along paths.
pub struct Evaluator<'a> {
    sol: &'a AdjointSolution,
    phi: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(sol: &'a AdjointSolution) -> Self {
        let width = sol.steps.iter().map(|s| s.features.len()).max().unwrap_or(1);
        let scratch = sol.steps.first().map_or(0, |s| s.features.scratch_len());
        Evaluator {
            sol,
            phi: vec![0.0; width],
            scratch: vec![0.0; scratch],
        }
    }

    /// `p_k` on `path` whose state at step `k` is `x`.
    pub fn p(&mut self, path: usize, k: usize, x: &[f64], out: &mut [f64]) {
        if k == self.sol.grid.steps {
            self.sol.terminal.eval(path, out);
            return;
        }
        let fit = &self.sol.steps[k];
        let phi = &mut self.phi[..fit.features.len()];
        fit.features.eval(x, &mut self.scratch, phi);
        fit.features.predict(phi, &fit.p_coef, out);
    }

    /// `(q¹_k, …, q^d_k)` concatenated, for `k < steps`.
    pub fn q(&mut self, k: usize, x: &[f64], out: &mut [f64]) {
        let fit = &self.sol.steps[k];
        let phi = &mut self.phi[..fit.features.len()];
        fit.features.eval(x, &mut self.scratch, phi);
        fit.features.predict(phi, &fit.q_coef, out);
    }
}

impl AdjointSolution {
    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator::new(self)
    }

    /// Least-squares slope of `p_k` on `X_k` for a scalar state.
    pub fn slope_on_state(&self, ens: &PathEnsemble, k: usize) -> f64 {
        let mut ev = self.evaluator();
        let mut p = [0.0];
        let (xs, ps): (Vec<f64>, Vec<f64>) = (0..ens.paths)
            .map(|j| {
                let x = ens.state(j, k);
                ev.p(j, k, x, &mut p);
                (x[0], p[0])
            })
            .unzip();
        crate::stats::linear_fit(&xs, &ps).1
    }

    /// Path average of `qⁱ_k` (concatenated over channels).
    pub fn mean_q(&self, ens: &PathEnsemble, k: usize) -> Vec<f64> {
        let w = self.d * self.n;
        let s = exec::sum_vectors(ens.paths, w, |r, acc| {
            let mut ev = self.evaluator();
            let mut q = vec![0.0; w];
            for j in r {
                ev.q(k, ens.state(j, k), &mut q);
                for (a, v) in acc.iter_mut().zip(&q) {
                    *a += v;
                }
            }
        });
        s.into_iter().map(|v| v / ens.paths as f64).collect()
    }
}

fn for_paths(
    features: &FeatureMap,
    ens: &PathEnsemble,
    k: usize,
    r: std::ops::Range<usize>,
    body: &mut dyn FnMut(usize, &[f64]),
) {
    let mut scratch = vec![0.0; features.scratch_len()];
    let mut phi = vec![0.0; features.len()];
    for j in r {
        features.eval(ens.state(j, k), &mut scratch, &mut phi);
        body(j, &phi);
    }
}

/// Solves the truncated adjoint equation on the horizon of `ens`.
pub fn solve_adjoint_finite(
    model: &ModelSpec,
    ens: &PathEnsemble,
    u_bar: &ControlLaw,
    basis: RegressionBasis,
    terminal: Terminal,
) -> Result<AdjointSolution> {
    basis.validate()?;
    check_law(model, u_bar)?;
    check_base(ens, u_bar)?;
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let (m, grid) = (ens.paths, ens.grid);
    terminal.validate(n, m)?;
    let dt = grid.dt;

    let mut next = vec![0.0; m * n];
    for j in 0..m {
        terminal.eval(j, &mut next[j * n..(j + 1) * n]);
    }
    let mut p_second_moment = vec![0.0; grid.steps + 1];
    p_second_moment[grid.steps] = exec::mean_of(m, |j| next[j * n..(j + 1) * n].iter().map(|v| v * v).sum());
    let mut fits: Vec<StepFit> = Vec::with_capacity(grid.steps);
    let mut cur = vec![0.0; m * n];

    for k in (0..grid.steps).rev() {
        let features = FeatureMap::fit(&basis, n, m, |j| ens.state(j, k));
        let pf = features.len();
        let scratch_len = features.scratch_len();
        let with_features = |r: std::ops::Range<usize>, body: &mut dyn FnMut(usize, &[f64])| {
            for_paths(&features, ens, k, r, body)
        };

        // Gram matrix and the conditional mean of p_{k+1}
        let a = exec::sum_vectors(m, pf * pf + pf * n, |r, acc| {
            let (gram, rhs) = acc.split_at_mut(pf * pf);
            with_features(
                r,
                &mut |j, phi| {
                    let pn = &next[j * n..(j + 1) * n];
                    for f in 0..pf {
                        for g in 0..pf {
                            gram[f * pf + g] += phi[f] * phi[g];
                        }
                        for c in 0..n {
                            rhs[f * n + c] += phi[f] * pn[c];
                        }
                    }
                },
            );
        });
        let ne = NormalEquations::new(&a[..pf * pf], pf, basis.ridge, k)?;
        let cond = ne.solve(&a[pf * pf..], n, k)?;

        // q targets from the centred increment of p
        let w = d * n;
        let b = exec::sum_vectors(m, pf * w + 1, |r, acc| {
            let mut mean = vec![0.0; n];
            with_features(
                r,
                &mut |j, phi| {
                    features.predict(phi, &cond, &mut mean);
                    let pn = &next[j * n..(j + 1) * n];
                    let dw = ens.increment(j, k);
                    for c in 0..n {
                        let dev = pn[c] - mean[c];
                        acc[pf * w] += dev * dev;
                        for i in 0..d {
                            let y = dev * dw[i] / dt;
                            for f in 0..pf {
                                acc[f * w + i * n + c] += phi[f] * y;
                            }
                        }
                    }
                },
            );
        });
        let q_coef = ne.solve(&b[..pf * w], w, k)?;
        let p_residual_var = b[pf * w] / m as f64;

        // p targets with the explicit driver
        let t = grid.time(k);
        let c_rhs = exec::sum_vectors(m, pf * n, |r, acc| {
            let mut ub = vec![0.0; l];
            let (mut bx, mut sx) = (vec![0.0; n * n], vec![0.0; d * n * n]);
            let (mut fx, mut q, mut y) = (vec![0.0; n], vec![0.0; w], vec![0.0; n]);
            with_features(
                r,
                &mut |j, phi| {
                    let x = ens.state(j, k);
                    u_bar.eval(t, x, &mut ub);
                    model.drift_dx(x, &ub, &mut bx);
                    model.diffusion_dx(x, &ub, &mut sx);
                    model.cost_dx(x, &ub, &mut fx);
                    features.predict(phi, &q_coef, &mut q);
                    let pn = &next[j * n..(j + 1) * n];
                    y.copy_from_slice(&fx);
                    crate::model::add_mat_t_vec(&bx, pn, &mut y);
                    for i in 0..d {
                        crate::model::add_mat_t_vec(&sx[i * n * n..(i + 1) * n * n], &q[i * n..(i + 1) * n], &mut y);
                    }
                    for c in 0..n {
                        let target = pn[c] + dt * y[c];
                        for f in 0..pf {
                            acc[f * n + c] += phi[f] * target;
                        }
                    }
                },
            );
        });
        if c_rhs.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite {
                what: format!("adjoint driver at step {k}"),
            });
        }
        let p_coef = ne.solve(&c_rhs, n, k)?;

        exec::for_each_chunk_mut(&mut cur, n * exec::CHUNK, |ci, chunk| {
            let mut scratch = vec![0.0; scratch_len];
            let mut phi = vec![0.0; pf];
            for (off, out) in chunk.chunks_mut(n).enumerate() {
                let j = ci * exec::CHUNK + off;
                features.eval(ens.state(j, k), &mut scratch, &mut phi);
                features.predict(&phi, &p_coef, out);
            }
        });
        p_second_moment[k] = exec::mean_of(m, |j| cur[j * n..(j + 1) * n].iter().map(|v| v * v).sum());
        std::mem::swap(&mut cur, &mut next);
        fits.push(StepFit {
            features,
            p_coef,
            q_coef,
            p_residual_var,
        });
    }
    fits.reverse();
    let sup = p_second_moment.iter().fold(0.0, |a: f64, v| a.max(*v));
    Ok(AdjointSolution {
        grid,
        paths: m,
        n,
        d,
        seed: ens.seed,
        control_id: ens.control_id.clone(),
        basis,
        terminal,
        steps: fits,
        p_second_moment,
        sup_p_second_moment: sup,
    })
}
