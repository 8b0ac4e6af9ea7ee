//! Truncated and ergodic cost functionals.
//!
//! `J_T = E∫₀ᵀ f(X_t, u_t) dt` uses left-endpoint quadrature on the grid.
//! The ergodic limits are approximated by the min and max of `J_T/T` over
//! the checkpoints in the last `window` fraction of the horizon.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::forward::{
    check_law, simulate_first_variation, simulate_perturbed, simulate_state, ControlSource, Direction,
    PathEnsemble, TimeGrid,
};
use crate::model::{ControlLaw, ModelSpec};
use crate::stats::{linear_fit, Estimate, Z95};

/// Ratio between consecutive checkpoints before the tail window.
pub const CHECKPOINT_RATIO: f64 = 1.5;
/// Uniformly spaced checkpoints inside the tail window.
pub const TAIL_CHECKPOINTS: usize = 8;
/// Fewest distinct tail checkpoints accepted.
pub const MIN_TAIL_CHECKPOINTS: usize = 5;
pub const DEFAULT_WINDOW: f64 = 0.25;

/// Checkpoint steps: a geometric ladder with ratio 1.5 below the tail, plus
/// evenly spaced points across `[(1-window)T, T]`, all snapped to the grid.
pub fn checkpoint_schedule(grid: TimeGrid, window: f64) -> Result<Vec<usize>> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(invalid("window", "must lie in (0, 1]"));
    }
    let s = grid.steps as f64;
    let tail_start = (1.0 - window) * s;
    let mut steps = Vec::new();
    let mut t = tail_start / CHECKPOINT_RATIO;
    while t >= 1.0 && steps.len() < 64 {
        steps.push(t.round() as usize);
        t /= CHECKPOINT_RATIO;
    }
    for i in 0..TAIL_CHECKPOINTS {
        let t = tail_start + window * s * i as f64 / (TAIL_CHECKPOINTS - 1) as f64;
        steps.push((t.round() as usize).max(1));
    }
    steps.sort_unstable();
    steps.dedup();
    let tail = steps.iter().filter(|k| **k as f64 >= tail_start - 1e-9).count();
    if tail < MIN_TAIL_CHECKPOINTS {
        return Err(invalid(
            "horizon",
            format!("only {tail} distinct checkpoints fall in the tail window"),
        ));
    }
    Ok(steps)
}

/// Per-path running-cost integrals `∫₀^{t_k} f dt` at the given steps,
/// returned path-major (`paths × steps.len()`).
pub fn cumulative_costs(model: &ModelSpec, ens: &PathEnsemble, source: &ControlSource, steps: &[usize]) -> Vec<f64> {
    let grid = ens.grid;
    let c = steps.len();
    let last = steps.iter().copied().max().unwrap_or(0);
    let l = source.control_dim();
    let mut out = vec![0.0; ens.paths * c];
    if c == 0 {
        return out;
    }
    exec::for_each_chunk_mut(&mut out, c * exec::CHUNK, |ci, chunk| {
        let (mut u, mut scratch) = (vec![0.0; l], vec![0.0; l]);
        for (off, row) in chunk.chunks_mut(c).enumerate() {
            let path = ci * exec::CHUNK + off;
            let mut acc = 0.0;
            for k in 0..=last {
                for (slot, s) in row.iter_mut().zip(steps) {
                    if *s == k {
                        *slot = acc;
                    }
                }
                if k == last {
                    break;
                }
                let x = ens.state(path, k);
                source.eval(path, k, grid.time(k), x, &mut u, &mut scratch);
                acc += grid.dt * model.cost(x, &u);
            }
        }
    });
    out
}

/// Monte Carlo estimate of `J_T = E∫₀ᵀ f(X_t, u_t) dt` for a feedback law.
#[allow(non_snake_case)]
pub fn estimate_cost_T(model: &ModelSpec, ens: &PathEnsemble, control: &ControlLaw, T: f64) -> Result<Estimate> {
    check_law(model, control)?;
    if control.id() != ens.control_id {
        return Err(Error::EnsembleMismatch("ensemble was generated under another control".into()));
    }
    let k = ens.grid.step_of(T)?;
    let vals = cumulative_costs(model, ens, &ControlSource::Feedback(control), &[k]);
    let (mean, var) = exec::mean_var_of(ens.paths, |j| vals[j]);
    Ok(Estimate::from_mean_var(mean, var, ens.paths))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicCostReport {
    /// `(T, Ĵ_T / T)` pairs.
    pub checkpoints: Vec<(f64, f64)>,
    /// 95% half-width of each checkpoint value.
    pub ci: Vec<f64>,
    pub tail_min: f64,
    pub tail_max: f64,
    pub tail_window: f64,
    /// Largest half-width among the tail checkpoints.
    pub tail_ci: f64,
}

impl ErgodicCostReport {
    /// Builds the report from per-path cumulative costs at `steps`.
    pub fn from_cumulative(grid: TimeGrid, steps: &[usize], totals: &[f64], paths: usize, window: f64) -> Self {
        let c = steps.len();
        let tail_start = (1.0 - window) * grid.steps as f64 - 1e-9;
        let mut r = ErgodicCostReport {
            checkpoints: Vec::with_capacity(c),
            ci: Vec::with_capacity(c),
            tail_min: f64::INFINITY,
            tail_max: f64::NEG_INFINITY,
            tail_window: window,
            tail_ci: 0.0,
        };
        for (i, &k) in steps.iter().enumerate() {
            let t = grid.time(k);
            let (mean, var) = exec::mean_var_of(paths, |j| totals[j * c + i] / t);
            let e = Estimate::from_mean_var(mean, var, paths);
            r.checkpoints.push((t, e.mean));
            r.ci.push(e.half_width);
            if k as f64 >= tail_start {
                r.tail_min = r.tail_min.min(e.mean);
                r.tail_max = r.tail_max.max(e.mean);
                r.tail_ci = r.tail_ci.max(e.half_width);
            }
        }
        r
    }
}

/// Ergodic-cost report for an existing ensemble generated by `control`.
pub fn ergodic_report(model: &ModelSpec, ens: &PathEnsemble, control: &ControlLaw, window: f64) -> Result<ErgodicCostReport> {
    let steps = checkpoint_schedule(ens.grid, window)?;
    let totals = cumulative_costs(model, ens, &ControlSource::Feedback(control), &steps);
    Ok(ErgodicCostReport::from_cumulative(ens.grid, &steps, &totals, ens.paths, window))
}

/// Simulates under `control` on `grid` and reports `J_T/T` at the checkpoints.
pub fn estimate_ergodic_cost(
    model: &ModelSpec,
    control: &ControlLaw,
    x0: &[f64],
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    window: f64,
) -> Result<ErgodicCostReport> {
    checkpoint_schedule(grid, window)?;
    let ens = simulate_state(model, control, x0, grid, paths, seed)?;
    ergodic_report(model, &ens, control, window)
}

/// Finite-difference and linearized directional derivatives of `J_T / T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateauxReport {
    pub theta: f64,
    pub horizon: f64,
    /// `(J_T(ū + θv) - J_T(ū)) / (θT)`.
    pub finite_difference: f64,
    /// The same quotient at `θ/2`.
    pub finite_difference_half: f64,
    /// `(1/T) E∫ ⟨D_x f, Y⟩ + ⟨D_u f, v⟩ dt`.
    pub linearized: f64,
    /// `|finite_difference - linearized|`.
    pub gap: f64,
    /// `|finite_difference_half - linearized|`.
    pub gap_half: f64,
    /// Richardson value `2·FD(θ/2) - FD(θ)`, which removes the `O(θ)` term.
    pub extrapolated: f64,
}

/// Compares the cost quotient with its first-order expansion on shared noise.
pub fn estimate_gateaux(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    u_alt: &ControlLaw,
    theta: f64,
    x0: &[f64],
    grid: TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<GateauxReport> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(invalid("theta", "must lie in (0, 1]"));
    }
    let base = simulate_state(model, u_bar, x0, grid, paths, seed)?;
    let horizon = grid.horizon();
    let last = [grid.steps];
    let base_cost = cumulative_costs(model, &base, &ControlSource::Feedback(u_bar), &last);
    let quotient = |th: f64| -> Result<f64> {
        let xt = simulate_perturbed(model, u_bar, u_alt, th, &base)?;
        let src = ControlSource::Perturbed {
            u_bar,
            u_alt,
            theta: th,
            base: &base,
        };
        let c = cumulative_costs(model, &xt, &src, &last);
        Ok(exec::mean_of(paths, |j| c[j] - base_cost[j]) / (th * horizon))
    };
    let fd = quotient(theta)?;
    let fd_half = quotient(theta / 2.0)?;

    let y = simulate_first_variation(model, &base, Direction { u_bar, u_alt })?;
    let (n, l) = (model.state_dim(), model.control_dim());
    let lin_sum = exec::sum_vectors(paths, 1, |r, acc| {
        let (mut ub, mut v) = (vec![0.0; l], vec![0.0; l]);
        let (mut fx, mut fu) = (vec![0.0; n], vec![0.0; l]);
        let dir = Direction { u_bar, u_alt };
        for j in r {
            for k in 0..grid.steps {
                let x = base.state(j, k);
                dir.eval(grid.time(k), x, &mut ub, &mut v);
                model.cost_dx(x, &ub, &mut fx);
                model.cost_du(x, &ub, &mut fu);
                let yv = y.value_at(j, k);
                let s: f64 = fx.iter().zip(yv).map(|(a, b)| a * b).sum::<f64>()
                    + fu.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                acc[0] += grid.dt * s;
            }
        }
    });
    let linearized = lin_sum[0] / (paths as f64 * horizon);
    Ok(GateauxReport {
        theta,
        horizon,
        finite_difference: fd,
        finite_difference_half: fd_half,
        linearized,
        gap: (fd - linearized).abs(),
        gap_half: (fd_half - linearized).abs(),
        extrapolated: 2.0 * fd_half - fd,
    })
}

/// Effect on the ergodic cost of replacing `ū` by `u` on `[0, T0)` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullTestReport {
    pub base: ErgodicCostReport,
    pub patched: ErgodicCostReport,
    /// Mean of `(J^patched_T - J_T)/T` at the final checkpoint, with its half-width.
    pub tail_difference: f64,
    pub tail_difference_ci: f64,
    /// Intercept `a` of the fit `ΔJ_T/T ≈ a + b/T` over the tail checkpoints.
    pub intercept: f64,
    pub intercept_ci: f64,
    pub pass: bool,
}

/// Runs the unpatched and patched controls on shared noise.
///
/// A perturbation confined to `[0, T0)` leaves a cost difference that settles
/// to a finite random amount, so `ΔJ_T/T` decays like `1/T`. The verdict fits
/// `a + b/T` per path over the tail checkpoints and passes when the mean
/// intercept is within twice its interval.
#[allow(clippy::too_many_arguments)]
pub fn local_perturbation_null_test(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    u_alt: &ControlLaw,
    t0: f64,
    x0: &[f64],
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    window: f64,
) -> Result<NullTestReport> {
    if !(t0 >= 0.0) || t0 >= (1.0 - window) * grid.horizon() {
        return Err(invalid("t0", "patch must end before the tail window"));
    }
    let patched_law = ControlLaw::switched(u_alt.clone(), u_bar.clone(), t0)?;
    let steps = checkpoint_schedule(grid, window)?;
    let base = simulate_state(model, u_bar, x0, grid, paths, seed)?;
    let pat = simulate_state(model, &patched_law, x0, grid, paths, seed)?;
    let tb = cumulative_costs(model, &base, &ControlSource::Feedback(u_bar), &steps);
    let tp = cumulative_costs(model, &pat, &ControlSource::Feedback(&patched_law), &steps);
    let c = steps.len();
    let base_report = ErgodicCostReport::from_cumulative(grid, &steps, &tb, paths, window);
    let patched_report = ErgodicCostReport::from_cumulative(grid, &steps, &tp, paths, window);

    let tail_start = (1.0 - window) * grid.steps as f64 - 1e-9;
    let tail: Vec<usize> = (0..c).filter(|&i| steps[i] as f64 >= tail_start).collect();
    let inv_t: Vec<f64> = tail.iter().map(|&i| 1.0 / grid.time(steps[i])).collect();
    // the intercept of a least-squares line is linear in the responses
    let weights: Vec<f64> = (0..tail.len())
        .map(|e| {
            let mut unit = vec![0.0; tail.len()];
            unit[e] = 1.0;
            linear_fit(&inv_t, &unit).0
        })
        .collect();
    let diff = |j: usize, i: usize| (tp[j * c + i] - tb[j * c + i]) / grid.time(steps[i]);
    let (a, var_a) = exec::mean_var_of(paths, |j| {
        tail.iter().zip(&weights).map(|(&i, w)| w * diff(j, i)).sum()
    });
    let (d_last, var_last) = exec::mean_var_of(paths, |j| diff(j, c - 1));
    let intercept_ci = Z95 * (var_a / paths as f64).sqrt();
    let scale = 1.0 + base_report.tail_max.abs();
    Ok(NullTestReport {
        pass: a.abs() <= 2.0 * intercept_ci + 1e-9 * scale,
        tail_difference: d_last,
        tail_difference_ci: Z95 * (var_last / paths as f64).sqrt(),
        intercept: a,
        intercept_ci,
        base: base_report,
        patched: patched_report,
    })
}
