//! Projected adjoint-gradient descent over feedback laws.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{grad_u_into, simulate_with_buffer, HamiltonianScratch, SmpSettings};
use crate::adjoint::ladder::check_buffer;
use crate::adjoint::{solve_adjoint_finite, Terminal};
use crate::cost::{checkpoint_schedule, cumulative_costs, ErgodicCostReport};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::forward::{check_law, ControlSource, PathEnsemble, TimeGrid};
use crate::model::{ControlKind, ControlLaw, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    pub smp: SmpSettings,
    /// Initial step `γ`; halved whenever a trial step raises the cost.
    pub step: f64,
    pub iterations: usize,
    /// Stop after this many iterations without a strict improvement.
    pub patience: usize,
    /// Stop once the fitted gradient norm falls below this value.
    pub grad_tolerance: f64,
}

impl OptimizeSettings {
    pub fn new(smp: SmpSettings, iterations: usize) -> Self {
        OptimizeSettings {
            smp,
            step: 0.5,
            iterations,
            patience: 5,
            grad_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    /// Gradient norm fell below the tolerance.
    Converged,
    /// No strict improvement within the patience window.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Gain then offset for affine laws, cell values for tables.
    pub params: Vec<f64>,
    pub tail_min: f64,
    pub tail_max: f64,
    pub ci: f64,
    /// Norm of the fitted gradient at the accepted iterate (`NaN` if rejected).
    pub grad_norm: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub best: ControlLaw,
    pub best_iteration: usize,
    pub best_cost: ErgodicCostReport,
    pub trace: Vec<TraceRow>,
    pub status: OptimizeStatus,
}

/// Parameters of a law in trace order.
pub fn law_params(law: &ControlLaw) -> Vec<f64> {
    match &law.kind {
        ControlKind::Constant { value } => value.clone(),
        ControlKind::AffineFeedback { gain, offset } => gain.iter().chain(offset).copied().collect(),
        ControlKind::TabulatedFeedback { values, .. } => values.clone(),
        ControlKind::Switched { .. } => Vec::new(),
    }
}

/// Descent direction in parameter space: adding it to the parameters moves
/// the control by `−Ê[D_u H | ·]` per unit step.
struct Gradient {
    delta: Vec<f64>,
    norm: f64,
}

fn cost_report(model: &ModelSpec, ens: &PathEnsemble, law: &ControlLaw, report_steps: usize, window: f64) -> Result<ErgodicCostReport> {
    let grid = TimeGrid::new(ens.grid.dt, report_steps)?;
    let steps = checkpoint_schedule(grid, window)?;
    let totals = cumulative_costs(model, ens, &ControlSource::Feedback(law), &steps);
    Ok(ErgodicCostReport::from_cumulative(grid, &steps, &totals, ens.paths, window))
}

/// Fits `Ê[D_u H | X]` along the paths on `[0, T)` in the law's own
/// parametrization.
fn fit_gradient(model: &ModelSpec, ens: &PathEnsemble, law: &ControlLaw, report_steps: usize, s: &SmpSettings) -> Result<Gradient> {
    let sol = solve_adjoint_finite(model, ens, law, s.basis, Terminal::Zero)?;
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    // Per-sample features: [x, 1] for affine laws, a one-hot cell otherwise.
    let (width, feature): (usize, Box<dyn Fn(&[f64], &mut [f64]) + Sync + '_>) = match &law.kind {
        ControlKind::AffineFeedback { .. } => (
            n + 1,
            Box::new(move |x, phi| {
                phi[..n].copy_from_slice(x);
                phi[n] = 1.0;
            }),
        ),
        ControlKind::TabulatedFeedback { bins, .. } => {
            let cells: usize = bins.iter().product();
            (
                cells,
                Box::new(move |x, phi| {
                    phi.fill(0.0);
                    phi[law.cell_index(x).expect("tabulated law")] = 1.0;
                }),
            )
        }
        ControlKind::Constant { .. } | ControlKind::Switched { .. } => {
            return Err(invalid("control", "only affine and tabulated laws are optimized"));
        }
    };
    let diagonal_only = matches!(law.kind, ControlKind::TabulatedFeedback { .. });
    let gram_len = if diagonal_only { width } else { width * width };
    let sums = exec::sum_vectors(ens.paths, gram_len + width * l, |r, acc| {
        let mut ev = sol.evaluator();
        let mut hs = HamiltonianScratch::new(model);
        let (mut p, mut q) = (vec![0.0; n], vec![0.0; n * d]);
        let (mut u, mut g, mut phi) = (vec![0.0; l], vec![0.0; l], vec![0.0; width]);
        let (gram, rhs) = acc.split_at_mut(gram_len);
        for j in r {
            for k in 0..report_steps {
                let x = ens.state(j, k);
                law.eval(ens.grid.time(k), x, &mut u);
                ev.p(j, k, x, &mut p);
                ev.q(k, x, &mut q);
                grad_u_into(model, x, &u, &p, &q, &mut hs, &mut g);
                feature(x, &mut phi);
                for a in 0..width {
                    if phi[a] == 0.0 {
                        continue;
                    }
                    if diagonal_only {
                        gram[a] += phi[a] * phi[a];
                    } else {
                        for b in 0..width {
                            gram[a * width + b] += phi[a] * phi[b];
                        }
                    }
                    for c in 0..l {
                        rhs[a * l + c] += phi[a] * g[c];
                    }
                }
            }
        }
    });
    let (gram, rhs) = sums.split_at(gram_len);
    // coef[a·l + c]: coefficient of feature a in component c of D_u H
    let coef: Vec<f64> = if diagonal_only {
        (0..width * l)
            .map(|i| {
                let w = gram[i / l];
                if w > 0.0 {
                    rhs[i] / w
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        let g = DMatrix::from_row_slice(width, width, gram);
        let b = DMatrix::from_row_slice(width, l, rhs);
        let chol = g.cholesky().ok_or_else(|| Error::Regression {
            step: 0,
            reason: "state Gram matrix of the gradient fit is singular".into(),
        })?;
        let x = chol.solve(&b);
        let mut out = vec![0.0; width * l];
        for a in 0..width {
            for c in 0..l {
                out[a * l + c] = x[(a, c)];
            }
        }
        out
    };
    let norm = DVector::from_column_slice(&coef).norm();
    let delta = match &law.kind {
        // u = −Kx + c, so D_u H ≈ A x + b moves K by +A and c by −b
        ControlKind::AffineFeedback { .. } => {
            let mut dk = vec![0.0; l * n];
            for c in 0..l {
                for a in 0..n {
                    dk[c * n + a] = coef[a * l + c];
                }
            }
            dk.extend((0..l).map(|c| -coef[n * l + c]));
            dk
        }
        _ => coef.iter().map(|v| -v).collect(),
    };
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "gradient".into() });
    }
    Ok(Gradient { delta, norm })
}

fn stepped(law: &ControlLaw, grad: &Gradient, step: f64) -> Result<ControlLaw> {
    let mut next = law.clone();
    let mut it = grad.delta.iter();
    let mut bump = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x += step * it.next().expect("gradient length");
        }
    };
    match &mut next.kind {
        ControlKind::AffineFeedback { gain, offset } => {
            bump(gain);
            bump(offset);
        }
        ControlKind::TabulatedFeedback { values, .. } => bump(values),
        ControlKind::Constant { .. } | ControlKind::Switched { .. } => unreachable!("rejected by fit_gradient"),
    }
    next.validate()?;
    Ok(next)
}

/// Runs fixed-step descent from `u_init`. Every iterate is simulated with
/// the same seed, so cost comparisons between iterates share their noise.
/// A constant initial law is optimized as an affine law with zero gain.
pub fn optimize_control(model: &ModelSpec, u_init: &ControlLaw, settings: &OptimizeSettings) -> Result<OptimizeResult> {
    check_law(model, u_init)?;
    let u_init = &match &u_init.kind {
        ControlKind::Constant { value } => {
            ControlLaw::affine(&u_init.set, u_init.state_dim, vec![0.0; value.len() * u_init.state_dim], value.clone())?
        }
        _ => u_init.clone(),
    };
    if !(settings.step > 0.0) || !settings.step.is_finite() {
        return Err(invalid("step", "must be positive"));
    }
    if settings.patience == 0 {
        return Err(invalid("patience", "must be at least 1"));
    }
    let s = &settings.smp;
    if s.buffer > 0.0 {
        check_buffer(model, s.buffer, s.seed)?;
    }
    let evaluate = |law: &ControlLaw| -> Result<(PathEnsemble, usize, ErgodicCostReport)> {
        let (ens, rs) = simulate_with_buffer(model, law, s)?;
        let report = cost_report(model, &ens, law, rs, s.window)?;
        Ok((ens, rs, report))
    };
    let row = |iteration: usize, law: &ControlLaw, r: &ErgodicCostReport, grad_norm: f64, step: f64, accepted: bool| {
        TraceRow {
            iteration,
            params: law_params(law),
            tail_min: r.tail_min,
            tail_max: r.tail_max,
            ci: r.tail_ci,
            grad_norm,
            step,
            accepted,
        }
    };

    let mut step = settings.step;
    let mut current = u_init.clone();
    let (ens, rs, mut current_cost) = evaluate(&current)?;
    let mut grad = fit_gradient(model, &ens, &current, rs, s)?;
    drop(ens);
    let mut best_iteration = 0;
    let mut trace = vec![row(0, &current, &current_cost, grad.norm, step, true)];
    let mut status = OptimizeStatus::MaxIterations;
    let mut since_improvement = 0;
    for iteration in 1..=settings.iterations {
        if grad.norm <= settings.grad_tolerance {
            status = OptimizeStatus::Converged;
            break;
        }
        let trial = stepped(&current, &grad, step)?;
        let (ens, rs, cost) = evaluate(&trial)?;
        if cost.tail_max <= current_cost.tail_max {
            if cost.tail_max < current_cost.tail_max {
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
            grad = fit_gradient(model, &ens, &trial, rs, s)?;
            trace.push(row(iteration, &trial, &cost, grad.norm, step, true));
            current = trial;
            current_cost = cost;
            best_iteration = iteration;
        } else {
            trace.push(row(iteration, &trial, &cost, f64::NAN, step, false));
            step /= 2.0;
            since_improvement += 1;
        }
        if since_improvement >= settings.patience {
            status = OptimizeStatus::Stalled;
            break;
        }
    }
    if status == OptimizeStatus::MaxIterations && grad.norm <= settings.grad_tolerance {
        status = OptimizeStatus::Converged;
    }
    Ok(OptimizeResult {
        best: current,
        best_iteration,
        best_cost: current_cost,
        trace,
        status,
    })
}

/// Writes `iteration,param_1..,tail_min,tail_max,ci,grad_norm,step,accepted`.
pub fn write_trace_csv<W: Write>(result: &OptimizeResult, mut out: W) -> Result<()> {
    let width = result.trace.first().map_or(0, |r| r.params.len());
    write!(out, "iteration")?;
    for i in 1..=width {
        write!(out, ",param_{i}")?;
    }
    writeln!(out, ",tail_min,tail_max,ci,grad_norm,step,accepted")?;
    for r in &result.trace {
        write!(out, "{}", r.iteration)?;
        for v in &r.params {
            write!(out, ",{v}")?;
        }
        writeln!(
            out,
            ",{},{},{},{},{},{}",
            r.tail_min, r.tail_max, r.ci, r.grad_norm, r.step, r.accepted
        )?;
    }
    Ok(())
}
