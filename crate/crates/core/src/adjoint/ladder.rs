//! Bounded infinite-horizon adjoint through zero-terminal truncations.

use serde::{Deserialize, Serialize};

use super::{solve_adjoint_finite, AdjointSolution, RegressionBasis, Terminal};
use crate::error::{invalid, Result};
use crate::exec;
use crate::forward::{simulate_state, PathEnsemble, TimeGrid};
use crate::model::{check_dissipativity, ControlLaw, ModelSpec};
use crate::stats::exponential_decay_fit;

/// Smallest accepted `buffer · |c_p|`: the terminal influence on `p` is then
/// damped by at least `e^{-2}` at the end of the reported window.
pub const MIN_BUFFER_DECAY: f64 = 2.0;
const PROBES: usize = 1000;

/// A zero-terminal solution on `[0, T_report + buffer]` whose first
/// `report_steps` steps stand in for the bounded infinite-horizon solution.
#[derive(Clone, Debug)]
pub struct InfiniteAdjoint {
    pub ensemble: PathEnsemble,
    pub solution: AdjointSolution,
    pub report_steps: usize,
    pub buffer: f64,
    /// Sampled dissipativity constant used to vet the buffer.
    pub c_p: f64,
}

/// Checks that `buffer` damps the terminal layer enough; returns `c_p`.
pub fn check_buffer(model: &ModelSpec, buffer: f64, seed: u64) -> Result<f64> {
    let diss = check_dissipativity(model, PROBES, seed);
    if !diss.pass {
        return Err(invalid("model", "dissipativity probe failed; no bounded adjoint to approximate"));
    }
    if buffer * diss.c_p.abs() < MIN_BUFFER_DECAY {
        return Err(invalid(
            "buffer",
            format!(
                "buffer {buffer} is shorter than {MIN_BUFFER_DECAY}/|c_p| = {}",
                MIN_BUFFER_DECAY / diss.c_p.abs()
            ),
        ));
    }
    Ok(diss.c_p)
}

/// Simulates under `ū` on `[0, T_report + buffer]` and solves with `ν = 0`.
#[allow(clippy::too_many_arguments)]
pub fn extend_to_infinite(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    x0: &[f64],
    t_report: f64,
    buffer: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    basis: RegressionBasis,
) -> Result<InfiniteAdjoint> {
    let c_p = check_buffer(model, buffer, seed)?;
    let grid = TimeGrid::with_horizon(dt, t_report + buffer)?;
    let report_steps = grid.step_of(t_report)?;
    let ensemble = simulate_state(model, u_bar, x0, grid, paths, seed)?;
    let solution = solve_adjoint_finite(model, &ensemble, u_bar, basis, Terminal::Zero)?;
    Ok(InfiniteAdjoint {
        ensemble,
        solution,
        report_steps,
        buffer,
        c_p,
    })
}

/// Distance between the `ν = 0` truncations at horizons `N < N'` on shared noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub short_horizon: f64,
    pub long_horizon: f64,
    pub times: Vec<f64>,
    /// `Ê|p^N_t - p^{N'}_t|²` on the grid of `[0, N]`.
    pub sq_diff: Vec<f64>,
    /// Fit `sq_diff ≈ C e^{-2β(N-t)}` over `t ∈ [N/2, N)`.
    pub fit_c: f64,
    pub beta: f64,
    /// Median per-step residual variance of the regressions times the
    /// feature count over the path count.
    pub noise_floor: f64,
    /// Largest `sq_diff` for `t ≤ N/2`.
    pub early_max: f64,
    pub early_below_floor: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn check_truncation_consistency(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    x0: &[f64],
    short_horizon: f64,
    long_horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    basis: RegressionBasis,
) -> Result<ConsistencyReport> {
    if !(short_horizon > 0.0 && short_horizon < long_horizon) {
        return Err(invalid("horizons", "need 0 < N < N'"));
    }
    let grid = TimeGrid::with_horizon(dt, long_horizon)?;
    let ns = grid.step_of(short_horizon)?;
    let long_ens = simulate_state(model, u_bar, x0, grid, paths, seed)?;
    let short_ens = long_ens.truncated(ns)?;
    let long = solve_adjoint_finite(model, &long_ens, u_bar, basis, Terminal::Zero)?;
    let short = solve_adjoint_finite(model, &short_ens, u_bar, basis, Terminal::Zero)?;
    let n = model.state_dim();
    let sums = exec::sum_vectors(paths, ns + 1, |r, acc| {
        let (mut ea, mut eb) = (short.evaluator(), long.evaluator());
        let (mut pa, mut pb) = (vec![0.0; n], vec![0.0; n]);
        for j in r {
            for (k, a) in acc.iter_mut().enumerate() {
                let x = long_ens.state(j, k);
                ea.p(j, k, x, &mut pa);
                eb.p(j, k, x, &mut pb);
                *a += pa.iter().zip(&pb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            }
        }
    });
    let sq_diff: Vec<f64> = sums.iter().map(|s| s / paths as f64).collect();
    let times: Vec<f64> = (0..=ns).map(|k| grid.time(k)).collect();
    let (s, y): (Vec<f64>, Vec<f64>) = (ns.div_ceil(2)..ns)
        .map(|k| (short_horizon - times[k], sq_diff[k]))
        .unzip();
    let (fit_c, beta) = exponential_decay_fit(&s, &y).map_or((0.0, f64::NAN), |(c, r)| (c, r / 2.0));
    let mut vars: Vec<f64> = long.steps.iter().map(|f| f.p_residual_var).collect();
    vars.sort_by(f64::total_cmp);
    let features = basis.feature_count(n) as f64;
    let noise_floor = vars[vars.len() / 2] * features / paths as f64;
    let early_max = sq_diff[..=ns / 2].iter().fold(0.0, |a: f64, v| a.max(*v));
    Ok(ConsistencyReport {
        short_horizon,
        long_horizon,
        times,
        sq_diff,
        fit_c,
        beta,
        noise_floor,
        early_max,
        early_below_floor: early_max <= 10.0 * noise_floor,
    })
}
