use serde::{Deserialize, Serialize};

use super::{
    simulate_first_variation, simulate_perturbed, simulate_state, Direction, PathEnsemble, PathValues,
    TimeGrid,
};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::model::{ControlLaw, ModelSpec};
use crate::stats::{self, Estimate};

fn check_order(model: &ModelSpec, q: u32) -> Result<()> {
    if q == 0 || q % 2 != 0 || q as f64 > model.moment_order() {
        return Err(invalid(
            "q",
            format!("moment order must be even, positive and at most p = {}", model.moment_order()),
        ));
    }
    Ok(())
}

fn norm_pow(x: &[f64], q: u32) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().powi(q as i32 / 2)
}

/// Sample mean of `|X_t|^q` with a 95% interval.
pub fn estimate_moment<E: PathValues>(model: &ModelSpec, ens: &E, q: u32, t: f64) -> Result<Estimate> {
    check_order(model, q)?;
    let k = ens.grid().step_of(t)?;
    let m = ens.path_count();
    let (mean, var) = exec::mean_var_of(m, |j| norm_pow(ens.value(j, k), q));
    Ok(Estimate::from_mean_var(mean, var, m))
}

/// `Ê|X_t|^q` at every grid step.
pub fn moment_profile<E: PathValues>(ens: &E, q: u32) -> Vec<f64> {
    let steps = ens.grid().steps;
    let m = ens.path_count();
    let sums = exec::sum_vectors(m, steps + 1, |r, acc| {
        for j in r {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += norm_pow(ens.value(j, k), q);
            }
        }
    });
    sums.into_iter().map(|s| s / m as f64).collect()
}

/// `Ê|A_t - B_t|²` at every grid step for two ensembles on shared noise.
pub fn second_moment_profile<A: PathValues, B: PathValues>(a: &A, b: &B) -> Result<Vec<f64>> {
    if a.grid() != b.grid() || a.path_count() != b.path_count() || a.dim() != b.dim() {
        return Err(Error::EnsembleMismatch("profiles need matching grids and paths".into()));
    }
    let steps = a.grid().steps;
    let m = a.path_count();
    let sums = exec::sum_vectors(m, steps + 1, |r, acc| {
        for j in r {
            for (k, s) in acc.iter_mut().enumerate() {
                *s += a
                    .value(j, k)
                    .iter()
                    .zip(b.value(j, k))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
    });
    Ok(sums.into_iter().map(|s| s / m as f64).collect())
}

/// Fitted constants of `Ê|X_t|^q ≤ e^{-qβt}|x0|^q + K(1 + sup_t Ê|u_t|^q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBoundFit {
    pub q: u32,
    pub beta: f64,
    pub k: f64,
    pub control_moment_sup: f64,
}

/// Fits the moment bound on an ensemble generated by `control`.
///
/// `K(β)` is the smallest constant making the bound hold at every step for a
/// given `β`; it increases with `β`. The reported `β` is the largest value on
/// a log grid over `[1e-3, 10]` whose `K(β)` stays within twice the larger of
/// `K(1e-3)` and the late-time level `max Ê|X_t|^q / (1 + sup Ê|u|^q)`.
pub fn fit_moment_bound(model: &ModelSpec, ens: &PathEnsemble, control: &ControlLaw, q: u32) -> Result<MomentBoundFit> {
    check_order(model, q)?;
    let grid = ens.grid;
    let m = ens.paths;
    let l = control.control_dim();
    let u_sums = exec::sum_vectors(m, grid.steps + 1, |r, acc| {
        let mut u = vec![0.0; l];
        for j in r {
            for (k, a) in acc.iter_mut().enumerate() {
                control.eval(grid.time(k), ens.state(j, k), &mut u);
                *a += norm_pow(&u, q);
            }
        }
    });
    let u_sup = u_sums.iter().map(|s| s / m as f64).fold(0.0, f64::max);
    let prof = moment_profile(ens, q);
    let x0q = norm_pow(ens.state(0, 0), q);
    let scale = 1.0 + u_sup;
    let k_of = |beta: f64| {
        prof.iter()
            .enumerate()
            .map(|(k, v)| (v - (-(q as f64) * beta * grid.time(k)).exp() * x0q) / scale)
            .fold(0.0, f64::max)
    };
    let late = prof[grid.steps / 2..].iter().fold(0.0, |a: f64, v| a.max(*v)) / scale;
    let betas: Vec<f64> = (0..=80).map(|i| 1e-3 * 10f64.powf(i as f64 / 20.0)).collect();
    let cap = 2.0 * k_of(betas[0]).max(late);
    let mut fit = MomentBoundFit {
        q,
        beta: 0.0,
        k: f64::INFINITY,
        control_moment_sup: u_sup,
    };
    for &b in &betas {
        let k = k_of(b);
        if k <= cap {
            fit.beta = b;
            fit.k = k;
        }
    }
    Ok(fit)
}

/// Decay rate of `Ê|X⁽¹⁾_t - X⁽²⁾_t|²` for two starts sharing all noise.
/// Returns the profile and the fitted exponential rate.
pub fn forgetting_rate(
    model: &ModelSpec,
    control: &ControlLaw,
    x0_a: &[f64],
    x0_b: &[f64],
    grid: TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let a = simulate_state(model, control, x0_a, grid, paths, seed)?;
    let b = simulate_state(model, control, x0_b, grid, paths, seed)?;
    let prof = second_moment_profile(&a, &b)?;
    let ts: Vec<f64> = (0..=grid.steps).map(|k| grid.time(k)).collect();
    // drop values that have reached rounding level
    let floor = prof[0] * 1e-24;
    let (s, y): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(&prof)
        .filter(|(_, v)| **v > floor)
        .map(|(t, v)| (*t, *v))
        .unzip();
    let rate = stats::exponential_decay_fit(&s, &y).map_or(f64::NAN, |(_, r)| r);
    Ok((prof, rate))
}

/// Sup-in-time second moments of the perturbation and of the first-order
/// expansion residual over a decreasing ladder of `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub thetas: Vec<f64>,
    /// `sup_t Ê|X^θ_t - X̄_t|²`.
    pub perturbation_sup: Vec<f64>,
    /// `sup_t Ê|(X^θ_t - X̄_t)/θ - Y_t|²`.
    pub residual_sup: Vec<f64>,
    /// Log-log slope of `perturbation_sup` against `θ`.
    pub perturbation_slope: f64,
    /// Residual strictly decreasing along the ladder.
    pub monotone: bool,
    /// Smallest-θ residual below half the largest-θ residual.
    pub halved: bool,
}

pub fn verify_expansion_residual(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    u_alt: &ControlLaw,
    thetas: &[f64],
    base: &PathEnsemble,
) -> Result<ExpansionReport> {
    if thetas.len() < 2 || thetas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("thetas", "need at least two strictly decreasing values"));
    }
    if thetas.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(invalid("thetas", "values must lie in (0, 1]"));
    }
    let y = simulate_first_variation(model, base, Direction { u_bar, u_alt })?;
    let (m, steps, n) = (base.paths, base.grid.steps, base.n);
    let mut pert = Vec::with_capacity(thetas.len());
    let mut resid = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let xt = simulate_perturbed(model, u_bar, u_alt, theta, base)?;
        let sums = exec::sum_vectors(m, 2 * (steps + 1), |r, acc| {
            for j in r {
                for k in 0..=steps {
                    let (a, b, yv) = (xt.state(j, k), base.state(j, k), y.value_at(j, k));
                    for i in 0..n {
                        let diff = a[i] - b[i];
                        acc[k] += diff * diff;
                        let e = diff / theta - yv[i];
                        acc[steps + 1 + k] += e * e;
                    }
                }
            }
        });
        let sup = |s: &[f64]| s.iter().fold(0.0, |a: f64, v| a.max(*v)) / m as f64;
        pert.push(sup(&sums[..=steps]));
        resid.push(sup(&sums[steps + 1..]));
    }
    let perturbation_slope = stats::log_log_slope(thetas, &pert);
    Ok(ExpansionReport {
        monotone: resid.windows(2).all(|w| w[1] < w[0]),
        halved: resid[resid.len() - 1] < 0.5 * resid[0],
        thetas: thetas.to_vec(),
        perturbation_sup: pert,
        residual_sup: resid,
        perturbation_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero(model: &ModelSpec) -> ControlLaw {
        ControlLaw::zero(model.control_set(), 1)
    }

    #[test]
    fn deterministic_second_moment() {
        let model = ModelSpec::lq1();
        let quiet = model.without_noise();
        let grid = TimeGrid::with_horizon(0.0005, 1.0).unwrap();
        let ens = simulate_state(&quiet, &zero(&quiet), &[1.0], grid, 8, 1).unwrap();
        let e = estimate_moment(&model, &ens, 2, 1.0).unwrap();
        assert!((e.mean - (-2.0f64).exp()).abs() < 1e-3);
        assert_eq!(e.half_width, 0.0);
    }

    #[test]
    fn ou_second_and_fourth_moments() {
        let model = ModelSpec::lq1();
        let grid = TimeGrid::with_horizon(0.01, 10.0).unwrap();
        let ens = simulate_state(&model, &zero(&model), &[1.0], grid, 20_000, 4).unwrap();
        let m2 = estimate_moment(&model, &ens, 2, 10.0).unwrap();
        let m4 = estimate_moment(&model, &ens, 4, 10.0).unwrap();
        // Euler on the OU process has stationary variance 1/(2 - dt)
        let v = 1.0 / (2.0 - grid.dt);
        assert!((m2.mean - v).abs() < 1.5 * m2.half_width, "{m2:?}");
        assert!((m4.mean - 3.0 * v * v).abs() < 1.5 * m4.half_width, "{m4:?}");
    }

    #[test]
    fn order_is_validated() {
        let model = ModelSpec::lq1();
        let grid = TimeGrid::with_horizon(0.1, 1.0).unwrap();
        let ens = simulate_state(&model, &zero(&model), &[1.0], grid, 4, 4).unwrap();
        assert!(estimate_moment(&model, &ens, 3, 1.0).is_err());
        assert!(estimate_moment(&model, &ens, 8, 1.0).is_err());
        assert!(estimate_moment(&model, &ens, 2, 1.05).is_err());
    }

    #[test]
    fn exponential_forgetting_rate_two() {
        let model = ModelSpec::lq1();
        let grid = TimeGrid::with_horizon(0.01, 5.0).unwrap();
        let (prof, rate) = forgetting_rate(&model, &zero(&model), &[0.0], &[5.0], grid, 64, 3).unwrap();
        assert!((rate - 2.0).abs() < 0.2, "rate {rate}");
        for (k, v) in prof.iter().enumerate() {
            // taming slows the per-step contraction by about dt²|b|, and |b| stays below 6 here
            assert!(*v <= 25.0 * (-2.0 * (1.0 - 6.0 * grid.dt) * grid.time(k)).exp());
        }
    }

    #[test]
    fn moment_bound_has_positive_rate() {
        for model in [ModelSpec::lq1(), ModelSpec::cubic1()] {
            let u = zero(&model);
            let grid = TimeGrid::with_horizon(0.01, 6.0).unwrap();
            let ens = simulate_state(&model, &u, &[2.0], grid, 2000, 8).unwrap();
            let fit = fit_moment_bound(&model, &ens, &u, 2).unwrap();
            assert!(fit.beta > 0.1 && fit.k.is_finite(), "{fit:?}");
        }
    }

    #[test]
    fn lq_expansion_is_first_order_exact() {
        let model = ModelSpec::lq1();
        let u_bar = zero(&model);
        let u_alt = ControlLaw::constant(model.control_set(), 1, vec![1.0]).unwrap();
        let grid = TimeGrid::with_horizon(0.01, 3.0).unwrap();
        let base = simulate_state(&model, &u_bar, &[0.0], grid, 512, 2).unwrap();
        let r = verify_expansion_residual(&model, &u_bar, &u_alt, &[0.2, 0.1, 0.05], &base).unwrap();
        assert!(r.residual_sup.iter().all(|v| *v < 1e-3), "{r:?}");
        assert!((r.perturbation_slope - 2.0).abs() < 0.05);
    }
}
