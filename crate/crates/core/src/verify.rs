//! Self-check suites run by `verify`.
//!
//! `trivial` evaluates identities with exact answers; `invariants` runs the
//! randomized property checks (derivatives, projections, determinism across
//! worker counts, moment bounds).

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint_finite, RegressionBasis, Terminal};
use crate::config::parse_config;
use crate::duality::{verify_duality_finite, DualityInputs};
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{fit_moment_bound, simulate_perturbed, simulate_state, Forcing, InitialCondition, TimeGrid};
use crate::model::{check_derivatives, check_dissipativity, ControlLaw, ConvexSet, ModelConfig, ModelSpec};
use crate::rng::aux_stream;
use crate::smp::{evaluate_variational_inequality, grad_u_hamiltonian, hamiltonian, Candidate, SmpSettings};

/// Relative tolerance of the derivative checks.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Trivial,
    Invariants,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trivial" => Ok(Suite::Trivial),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite `{other}` (trivial, invariants, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.into(),
        pass,
        detail,
    }
}

/// Runs `suite` against the built-in models and `model`.
pub fn run_suite(model: &ModelSpec, suite: Suite, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Trivial | Suite::All) {
        checks.extend(trivial_checks(seed));
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        checks.extend(invariant_checks(model, seed));
    }
    let pass = checks.iter().all(|c| c.pass);
    VerifyReport { suite, checks, pass }
}

pub fn trivial_checks(seed: u64) -> Vec<CheckResult> {
    let lq = ModelSpec::lq1();
    let zero = ControlLaw::zero(lq.control_set(), 1);
    vec![
        check("hamiltonian_at_zero", || {
            let h = hamiltonian(&lq, &[0.0], &[0.0], &[0.0], &[0.0]);
            Ok((h == 0.0, format!("H = {h}")))
        }),
        check("hamiltonian_arithmetic", || {
            let a = hamiltonian(&lq, &[1.0], &[1.0], &[1.0], &[0.0]);
            let b = hamiltonian(&lq, &[1.0], &[0.0], &[1.0], &[1.0]);
            Ok((a == 2.0 && b == 1.0, format!("H = {a}, {b}; expected 2, 1")))
        }),
        check("control_gradient_arithmetic", || {
            let g = grad_u_hamiltonian(&lq, &[1.0], &[0.0], &[1.0], &[0.0]);
            Ok((g == [1.0], format!("D_u H = {g:?}")))
        }),
        check("ball_projection", || {
            let ball = ConvexSet::Ball {
                center: vec![0.0, 0.0],
                radius: 1.0,
            };
            let p = ball.project(&[3.0, 4.0]);
            let ok = (p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15;
            Ok((ok, format!("{p:?}")))
        }),
        check("zero_theta_reproduces_base", || {
            let grid = TimeGrid::new(0.01, 200)?;
            let base = simulate_state(&lq, &zero, &[1.0], grid, 64, seed)?;
            let alt = ControlLaw::constant(lq.control_set(), 1, vec![1.0])?;
            let pert = simulate_perturbed(&lq, &zero, &alt, 0.0, &base)?;
            Ok((pert.states == base.states, "bitwise comparison".into()))
        }),
        check("zero_direction_pairs_to_zero", || {
            let u = ControlLaw::linear_feedback(lq.control_set(), 0.3);
            let s = SmpSettings::new(vec![0.0], 4.0, 0.01, 64, seed);
            let c = [Candidate {
                name: "same".into(),
                law: u.clone(),
            }];
            let r = evaluate_variational_inequality(&lq, &u, &c, &s)?;
            let ok = r[0].checkpoints.iter().all(|(_, v)| *v == 0.0);
            Ok((ok, format!("tail_min = {}", r[0].tail_min)))
        }),
        check("duality_with_zero_data", || {
            let inputs = DualityInputs {
                t: 0.0,
                eta: InitialCondition::Zero,
                gamma: Forcing::Zero,
                rho: vec![Forcing::Zero],
            };
            let grid = TimeGrid::new(0.01, 100)?;
            let r = verify_duality_finite(&lq, &zero, &[1.0], &inputs, Terminal::Zero, grid, 64, seed, RegressionBasis::default())?;
            Ok((r.lhs == 0.0 && r.rhs == 0.0, format!("lhs = {}, rhs = {}", r.lhs, r.rhs)))
        }),
        check("zero_cost_gives_zero_adjoint", || {
            let mut c = ModelConfig::lq1();
            c.q = vec![vec![0.0]];
            c.r = vec![vec![0.0]];
            let m = ModelSpec::new(c)?;
            let ens = simulate_state(&m, &zero, &[1.0], TimeGrid::new(0.01, 100)?, 64, seed)?;
            let sol = solve_adjoint_finite(&m, &ens, &zero, RegressionBasis::default(), Terminal::Zero)?;
            let ok = sol.sup_p_second_moment == 0.0;
            Ok((ok, format!("sup E|p|² = {}", sol.sup_p_second_moment)))
        }),
        check("bad_constants_rejected", || {
            let mut c = ModelConfig::lq1();
            c.m = Some(0);
            c.p = Some(4.0);
            Ok((ModelSpec::new(c).is_err(), "p = 4, m = 0".into()))
        }),
        check("reversed_box_rejected", || {
            let mut c = ModelConfig::lq1();
            c.control_set = ConvexSet::interval(5.0, -5.0);
            Ok((ModelSpec::new(c).is_err(), "lower 5 > upper -5".into()))
        }),
        check("unknown_config_key_rejected", || {
            let text = "family = \"lq\"\nn = 1\nbogus = 2\n";
            Ok((parse_config(text).is_err(), "key `bogus`".into()))
        }),
    ]
}

pub fn invariant_checks(model: &ModelSpec, seed: u64) -> Vec<CheckResult> {
    let models = [("lq1", ModelSpec::lq1()), ("cubic1", ModelSpec::cubic1()), ("config", model.clone())];
    let mut out = Vec::new();
    for (name, m) in &models {
        out.push(check(&format!("derivatives_{name}"), || {
            let worst = check_derivatives(m, 100, seed, 1e-5);
            Ok((worst <= DERIVATIVE_TOLERANCE, format!("max relative error {worst:.2e}")))
        }));
        out.push(check(&format!("hamiltonian_gradient_{name}"), || {
            let worst = hamiltonian_gradient_error(m, seed);
            Ok((worst <= DERIVATIVE_TOLERANCE, format!("max relative error {worst:.2e}")))
        }));
    }
    let sets = [
        model.control_set().clone(),
        ConvexSet::Box {
            lower: vec![-1.0, 0.0, -2.0],
            upper: vec![1.0, 0.5, 3.0],
        },
        ConvexSet::Ball {
            center: vec![1.0, -1.0],
            radius: 2.0,
        },
    ];
    for (i, set) in sets.iter().enumerate() {
        out.push(check(&format!("projection_{i}"), || Ok(projection_properties(set, seed))));
    }
    out.push(check("dissipativity_config", || {
        let r = check_dissipativity(model, 1000, seed);
        Ok((r.pass, format!("sampled max {:.4}, c_p {:.4}", r.sampled_max, r.c_p)))
    }));
    out.push(check("worker_determinism", || worker_determinism(model, seed)));
    for (name, m) in &models {
        out.push(check(&format!("moment_bound_{name}"), || {
            let u = ControlLaw::zero(m.control_set(), m.state_dim());
            let grid = TimeGrid::new(0.01, 1000)?;
            let x0 = vec![2.0; m.state_dim()];
            let ens = simulate_state(m, &u, &x0, grid, 512, seed)?;
            let fit = fit_moment_bound(m, &ens, &u, 2)?;
            let ok = fit.beta > 0.0 && fit.k.is_finite();
            Ok((ok, format!("beta {:.3}, K {:.3}", fit.beta, fit.k)))
        }));
    }
    out
}

/// Largest relative error of `D_u H` against central differences of `H`.
fn hamiltonian_gradient_error(m: &ModelSpec, seed: u64) -> f64 {
    let (n, d, l) = (m.state_dim(), m.noise_dim(), m.control_dim());
    let mut rng = aux_stream(seed, 0x4847);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..100 {
        let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (x, u, p, q) = (draw(n), draw(l), draw(n), draw(n * d));
        let g = grad_u_hamiltonian(m, &x, &u, &p, &q);
        for i in 0..l {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[i] += h;
            um[i] -= h;
            let fd = (hamiltonian(m, &x, &up, &p, &q) - hamiltonian(m, &x, &um, &p, &q)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
    }
    worst
}

/// Idempotence and non-expansiveness on 1000 random pairs.
fn projection_properties(set: &ConvexSet, seed: u64) -> (bool, String) {
    let l = set.dim();
    let mut rng = aux_stream(seed, 0x5052);
    let (mut idem, mut expand): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let a: Vec<f64> = (0..l).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..l).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (pa, pb) = (set.project(&a), set.project(&b));
        let ppa = set.project(&pa);
        idem = idem.max(pa.iter().zip(&ppa).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt();
        expand = expand.max(dist(&pa, &pb) - dist(&a, &b));
    }
    (
        idem <= 1e-12 && expand <= 1e-12,
        format!("idempotence gap {idem:.1e}, expansion {expand:.1e}"),
    )
}

/// Simulation and adjoint coefficients with 1 and 3 workers, compared bitwise.
fn worker_determinism(model: &ModelSpec, seed: u64) -> Result<(bool, String)> {
    let u = ControlLaw::zero(model.control_set(), model.state_dim());
    let x0 = vec![0.5; model.state_dim()];
    let grid = TimeGrid::new(0.01, 200)?;
    let run = |workers| {
        exec::with_workers(Some(workers), || -> Result<_> {
            let ens = simulate_state(model, &u, &x0, grid, 1000, seed)?;
            let sol = solve_adjoint_finite(model, &ens, &u, RegressionBasis::default(), Terminal::Zero)?;
            Ok((ens.states, sol))
        })
    };
    let (a, b) = (run(1)?, run(3)?);
    let ok = a.0 == b.0 && a.1 == b.1;
    let mode = if exec::is_parallel() { "parallel" } else { "sequential" };
    Ok((ok, format!("1 vs 3 workers ({mode} build)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_suite_is_green() {
        let r = run_suite(&ModelSpec::lq1(), Suite::Trivial, 1);
        assert!(r.pass, "{:#?}", r.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    }

    #[test]
    fn invariant_suite_is_green_on_cubic() {
        let r = run_suite(&ModelSpec::cubic1(), Suite::Invariants, 2);
        assert!(r.pass, "{:#?}", r.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("most".parse::<Suite>().is_err());
    }
}
