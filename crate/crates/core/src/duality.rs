//! Numerical check of the duality between the adjoint pair `(p, q)` and the
//! affine dual equation.
//!
//! On the grid the identity reads
//! `E⟨p_t, η⟩ + dt Σ_k E⟨p_{k+1}, γ_k⟩ + dt Σ_k Σᵢ E⟨qⁱ_k, ρⁱ_k⟩
//!  = dt Σ_k E⟨Ψ_k, 𝒴_k⟩ + E⟨ν, 𝒴_T⟩`,
//! where the sums run over the steps from `t` to `T`. Both sides use the same
//! paths, so the residual measures the regression error of the adjoint
//! solver rather than Monte Carlo noise.

use serde::{Deserialize, Serialize};

use crate::adjoint::{extend_to_infinite, solve_adjoint_finite, AdjointSolution, RegressionBasis, Terminal};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::forward::{simulate_affine_dual, simulate_state, DualEnsemble, Forcing, InitialCondition, PathEnsemble, TimeGrid};
use crate::model::{ControlLaw, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    /// `abs_residual / max(|lhs|, |rhs|, 1e-12)`.
    pub rel_residual: f64,
    /// `E⟨p_t, η⟩`, `dt Σ E⟨p, γ⟩`, `dt Σ E⟨q, ρ⟩`.
    pub lhs_terms: [f64; 3],
    /// `dt Σ E⟨Ψ, 𝒴⟩`, `E⟨ν, 𝒴_T⟩`.
    pub rhs_terms: [f64; 2],
    /// Bound on the neglected `∫_H^∞ E⟨Ψ, 𝒴⟩` in the infinite-horizon check.
    pub tail_bound: Option<f64>,
    pub t: f64,
    pub horizon: f64,
    pub eta: String,
    pub gamma: String,
    pub rho: Vec<String>,
    pub nu: String,
    pub paths: usize,
    pub seed: u64,
}

impl DualityReport {
    fn new(lhs_terms: [f64; 3], rhs_terms: [f64; 2]) -> Self {
        let lhs: f64 = lhs_terms.iter().sum();
        let rhs: f64 = rhs_terms.iter().sum();
        let abs_residual = (lhs - rhs).abs();
        DualityReport {
            lhs,
            rhs,
            abs_residual,
            rel_residual: abs_residual / lhs.abs().max(rhs.abs()).max(1e-12),
            lhs_terms,
            rhs_terms,
            tail_bound: None,
            t: 0.0,
            horizon: 0.0,
            eta: String::new(),
            gamma: String::new(),
            rho: Vec::new(),
            nu: String::new(),
            paths: 0,
            seed: 0,
        }
    }
}

/// Problem data shared by both checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityInputs {
    pub t: f64,
    pub eta: InitialCondition,
    pub gamma: Forcing,
    /// One forcing per noise channel.
    pub rho: Vec<Forcing>,
}

/// Both sides of the identity over steps `[start, end)` of `dual`, with
/// `ν` read from `sol` at step `end`. Also returns `E|𝒴_end|²` and the
/// per-step `E|Ψ_k|²`.
fn pair_sums(
    model: &ModelSpec,
    base: &PathEnsemble,
    u_bar: &ControlLaw,
    sol: &AdjointSolution,
    dual: &DualEnsemble,
    end: usize,
) -> ([f64; 3], [f64; 2], f64, Vec<f64>) {
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let grid = base.grid;
    let dt = grid.dt;
    let start = dual.start_step;
    let m = base.paths;
    let width = 6 + (end - start);
    let s = exec::sum_vectors(m, width, |r, acc| {
        let mut ev = sol.evaluator();
        let (mut p, mut q) = (vec![0.0; n], vec![0.0; n * d]);
        let (mut g, mut rho) = (vec![0.0; n], vec![0.0; n]);
        let (mut ub, mut psi) = (vec![0.0; l], vec![0.0; n]);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for j in r {
            ev.p(j, start, base.state(j, start), &mut p);
            acc[0] += dot(&p, dual.value_at(j, start));
            for k in start..end {
                let t = grid.time(k);
                let x = base.state(j, k);
                if !dual.gamma.is_zero() {
                    dual.gamma.eval(t, x, &mut g);
                    ev.p(j, k + 1, base.state(j, k + 1), &mut p);
                    acc[1] += dt * dot(&p, &g);
                }
                if dual.rho.iter().any(|f| !f.is_zero()) {
                    ev.q(k, x, &mut q);
                    for (i, f) in dual.rho.iter().enumerate() {
                        f.eval(t, x, &mut rho);
                        acc[2] += dt * dot(&q[i * n..(i + 1) * n], &rho);
                    }
                }
                u_bar.eval(t, x, &mut ub);
                model.cost_dx(x, &ub, &mut psi);
                acc[3] += dt * dot(&psi, dual.value_at(j, k));
                acc[6 + k - start] += dot(&psi, &psi);
            }
            let y_end = dual.value_at(j, end);
            ev.p(j, end, base.state(j, end), &mut p);
            acc[4] += dot(&p, y_end);
            acc[5] += dot(y_end, y_end);
        }
    });
    let mf = m as f64;
    (
        [s[0] / mf, s[1] / mf, s[2] / mf],
        [s[3] / mf, s[4] / mf],
        s[5] / mf,
        s[6..].iter().map(|v| v / mf).collect(),
    )
}

fn check_inputs(model: &ModelSpec, grid: TimeGrid, inputs: &DualityInputs) -> Result<()> {
    grid.step_of(inputs.t)?;
    if inputs.rho.len() != model.noise_dim() {
        return Err(Error::Shape {
            what: "rho".into(),
            expected: model.noise_dim(),
            got: inputs.rho.len(),
        });
    }
    Ok(())
}

/// Checks the finite-horizon identity on `[t, T]` with terminal data `ν`.
#[allow(clippy::too_many_arguments)]
pub fn verify_duality_finite(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    x0: &[f64],
    inputs: &DualityInputs,
    nu: Terminal,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    basis: RegressionBasis,
) -> Result<DualityReport> {
    check_inputs(model, grid, inputs)?;
    let base = simulate_state(model, u_bar, x0, grid, paths, seed)?;
    let sol = solve_adjoint_finite(model, &base, u_bar, basis, nu)?;
    let dual = simulate_affine_dual(
        model,
        &base,
        u_bar,
        inputs.t,
        inputs.eta.clone(),
        inputs.gamma.clone(),
        inputs.rho.clone(),
    )?;
    let (lhs, rhs, _, _) = pair_sums(model, &base, u_bar, &sol, &dual, grid.steps);
    let mut r = DualityReport::new(lhs, rhs);
    echo(&mut r, inputs, grid.horizon(), sol.terminal.id(), paths, seed);
    Ok(r)
}

fn echo(r: &mut DualityReport, inputs: &DualityInputs, horizon: f64, nu: String, paths: usize, seed: u64) {
    r.t = inputs.t;
    r.horizon = horizon;
    r.eta = inputs.eta.id();
    r.gamma = inputs.gamma.id();
    r.rho = inputs.rho.iter().map(Forcing::id).collect();
    r.nu = nu;
    r.paths = paths;
    r.seed = seed;
}

/// Checks the infinite-horizon identity
/// `∫_t^∞ E⟨Ψ, 𝒴⟩ = Σᵢ E∫⟨qⁱ, ρⁱ⟩ + E⟨η, p_t⟩` for forcings supported in
/// `[0, T]`. The adjoint comes from a zero-terminal solve on
/// `[0, T_report + buffer]`; the dual integral is truncated there and the
/// remainder bounded by `√E|𝒴_H|² · sup √E|Ψ|² / |c_p|`.
#[allow(clippy::too_many_arguments)]
pub fn verify_duality_infinite(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    x0: &[f64],
    inputs: &DualityInputs,
    support_end: f64,
    t_report: f64,
    buffer: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    basis: RegressionBasis,
) -> Result<DualityReport> {
    if !inputs.gamma.is_zero() {
        return Err(invalid("gamma", "the infinite-horizon identity has no drift forcing"));
    }
    if support_end > t_report || inputs.t > support_end {
        return Err(invalid("support", "need t <= T <= T_report"));
    }
    if inputs.rho.iter().any(|f| f.support_end() > support_end) {
        return Err(invalid("rho", "forcing support extends beyond T"));
    }
    let inf = extend_to_infinite(model, u_bar, x0, t_report, buffer, dt, paths, seed, basis)?;
    let grid = inf.ensemble.grid;
    check_inputs(model, grid, inputs)?;
    let dual = simulate_affine_dual(
        model,
        &inf.ensemble,
        u_bar,
        inputs.t,
        inputs.eta.clone(),
        Forcing::Zero,
        inputs.rho.clone(),
    )?;
    let (lhs, rhs, y_end, psi) = pair_sums(model, &inf.ensemble, u_bar, &inf.solution, &dual, grid.steps);
    let psi_sup = psi.iter().fold(0.0, |a: f64, v| a.max(*v)).sqrt();
    let mut r = DualityReport::new(lhs, rhs);
    r.tail_bound = Some(y_end.sqrt() * psi_sup / inf.c_p.abs());
    echo(&mut r, inputs, grid.horizon(), "zero".into(), paths, seed);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq_zero() -> (ModelSpec, ControlLaw) {
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        (model, u)
    }

    fn inputs(eta: InitialCondition, gamma: Forcing, rho: Forcing) -> DualityInputs {
        DualityInputs {
            t: 0.0,
            eta,
            gamma,
            rho: vec![rho],
        }
    }

    #[test]
    fn all_zero_data() {
        let (model, u) = lq_zero();
        let grid = TimeGrid::with_horizon(0.01, 2.0).unwrap();
        let inp = inputs(InitialCondition::Zero, Forcing::Zero, Forcing::Zero);
        let r = verify_duality_finite(&model, &u, &[1.0], &inp, Terminal::Zero, grid, 64, 1, RegressionBasis::default())
            .unwrap();
        assert_eq!((r.lhs, r.rhs, r.abs_residual), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unit_eta_matches_oracle() {
        let (model, u) = lq_zero();
        let grid = TimeGrid::with_horizon(0.01, 8.0).unwrap();
        let inp = inputs(InitialCondition::Constant { value: vec![1.0] }, Forcing::Zero, Forcing::Zero);
        let r = verify_duality_finite(&model, &u, &[1.0], &inp, Terminal::Zero, grid, 2048, 2, RegressionBasis::default())
            .unwrap();
        assert!(r.rel_residual < 0.05, "{r:?}");
        assert!((r.lhs - 1.0).abs() < 0.05 && (r.rhs - 1.0).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn drift_forcing_matches_closed_form() {
        // lhs ≈ ∫₀² E p_s ds with p_s ≈ X_s and E X_s = e^{-s}
        let (model, u) = lq_zero();
        let grid = TimeGrid::with_horizon(0.01, 8.0).unwrap();
        let inp = inputs(InitialCondition::Zero, Forcing::constant(vec![1.0], 0.0, 2.0), Forcing::Zero);
        let r = verify_duality_finite(&model, &u, &[1.0], &inp, Terminal::Zero, grid, 2048, 3, RegressionBasis::default())
            .unwrap();
        assert!(r.rel_residual < 0.05, "{r:?}");
        assert!((r.lhs - (1.0 - (-2.0f64).exp())).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn state_eta_on_cubic_model() {
        let model = ModelSpec::cubic1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let grid = TimeGrid::with_horizon(0.01, 4.0).unwrap();
        let inp = DualityInputs {
            t: 1.0,
            eta: InitialCondition::State,
            gamma: Forcing::Zero,
            rho: vec![Forcing::constant(vec![0.5], 1.0, 2.0)],
        };
        let r = verify_duality_finite(&model, &u, &[1.0], &inp, Terminal::Zero, grid, 4096, 4, RegressionBasis::default())
            .unwrap();
        assert!(r.rel_residual < 0.05, "{r:?}");
    }

    #[test]
    fn per_path_terminal_data() {
        let (model, u) = lq_zero();
        let grid = TimeGrid::with_horizon(0.01, 3.0).unwrap();
        let base = simulate_state(&model, &u, &[1.0], grid, 2048, 5).unwrap();
        let nu: Vec<f64> = (0..2048).map(|j| base.state(j, grid.steps)[0]).collect();
        let inp = inputs(InitialCondition::Constant { value: vec![1.0] }, Forcing::Zero, Forcing::Zero);
        let r = verify_duality_finite(
            &model,
            &u,
            &[1.0],
            &inp,
            Terminal::PerPath { values: nu },
            grid,
            2048,
            5,
            RegressionBasis::default(),
        )
        .unwrap();
        assert!(r.rel_residual < 0.05, "{r:?}");
        assert!(r.rhs_terms[1] > 0.0);
    }

    #[test]
    fn eta_scaling_is_linear() {
        let (model, u) = lq_zero();
        let grid = TimeGrid::with_horizon(0.01, 4.0).unwrap();
        let run = |s: f64| {
            let inp = inputs(InitialCondition::Constant { value: vec![s] }, Forcing::Zero, Forcing::Zero);
            verify_duality_finite(&model, &u, &[1.0], &inp, Terminal::Zero, grid, 512, 6, RegressionBasis::default())
                .unwrap()
        };
        let (r1, r2, r10) = (run(1.0), run(2.0), run(10.0));
        assert!((r2.lhs_terms[0] / r1.lhs_terms[0] - 2.0).abs() < 0.2);
        assert!((r10.rhs_terms[0] / r1.rhs_terms[0] - 10.0).abs() < 1.0);
        assert!((r10.abs_residual / r1.abs_residual - 10.0).abs() < 1.0);
    }

    #[test]
    fn infinite_noise_forcing_pairs_with_q() {
        let (model, u) = lq_zero();
        let inp = inputs(InitialCondition::Zero, Forcing::Zero, Forcing::constant(vec![1.0], 0.0, 1.0));
        let r = verify_duality_infinite(&model, &u, &[1.0], &inp, 1.0, 2.0, 4.0, 0.01, 4096, 7, RegressionBasis::default())
            .unwrap();
        assert!((r.lhs - 1.0).abs() < 0.05, "{r:?}");
        assert!(r.rel_residual < 0.05, "{r:?}");
        assert!(r.tail_bound.unwrap() < 0.05);
        let bad = inputs(InitialCondition::Zero, Forcing::Zero, Forcing::constant(vec![1.0], 0.0, 3.0));
        assert!(verify_duality_infinite(&model, &u, &[1.0], &bad, 2.0, 2.0, 4.0, 0.01, 64, 7, RegressionBasis::default())
            .is_err());
    }

    #[test]
    fn infinite_unit_eta() {
        let (model, u) = lq_zero();
        let inp = inputs(InitialCondition::Constant { value: vec![1.0] }, Forcing::Zero, Forcing::Zero);
        let r = verify_duality_infinite(&model, &u, &[1.0], &inp, 0.0, 2.0, 4.0, 0.01, 2048, 8, RegressionBasis::default())
            .unwrap();
        assert!((r.lhs - 1.0).abs() < 0.05 && r.rel_residual < 0.05, "{r:?}");
    }
}
