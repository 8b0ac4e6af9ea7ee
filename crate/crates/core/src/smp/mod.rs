//! Hamiltonian, the variational-inequality test of optimality, the
//! sufficiency check and an adjoint-gradient optimizer.
//!
//! With `q` stored channel-major (`qⁱ = q[i·n..(i+1)·n]`),
//! `H(x, u, p, q) = ⟨b, p⟩ + Σᵢ ⟨σⁱ, qⁱ⟩ + f` and
//! `D_u H = D_u bᵀ p + Σᵢ D_u σⁱᵀ qⁱ + D_u f`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint_finite, AdjointSolution, RegressionBasis, Terminal};
use crate::adjoint::ladder::check_buffer;
use crate::cost::{checkpoint_schedule, ErgodicCostReport, DEFAULT_WINDOW};
use crate::error::{invalid, Result};
use crate::exec;
use crate::forward::{simulate_state, PathEnsemble, TimeGrid};
use crate::model::{add_mat_t_vec, dot, ControlLaw, ModelSpec};
use crate::rng::aux_stream;

mod optimize;

pub use optimize::{law_params, optimize_control, write_trace_csv, OptimizeResult, OptimizeSettings, OptimizeStatus, TraceRow};

/// Floor of the tolerance used for sign tests.
pub const MIN_TOLERANCE: f64 = 0.01;
/// Tolerance on the smallest Hessian eigenvalue.
pub const CONVEXITY_TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

pub fn hamiltonian(model: &ModelSpec, x: &[f64], u: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let (n, d) = (model.state_dim(), model.noise_dim());
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    model.drift(x, u, &mut b);
    model.diffusion(x, u, &mut s);
    let noise: f64 = (0..d)
        .map(|i| (0..n).map(|r| s[r * d + i] * q[i * n + r]).sum::<f64>())
        .sum();
    dot(&b, p) + noise + model.cost(x, u)
}

/// Scratch buffers for repeated gradient evaluations.
pub(crate) struct HamiltonianScratch {
    bu: Vec<f64>,
    su: Vec<f64>,
    bx: Vec<f64>,
    sx: Vec<f64>,
}

impl HamiltonianScratch {
    pub fn new(model: &ModelSpec) -> Self {
        let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
        HamiltonianScratch {
            bu: vec![0.0; n * l],
            su: vec![0.0; d * n * l],
            bx: vec![0.0; n * n],
            sx: vec![0.0; d * n * n],
        }
    }
}

pub(crate) fn grad_u_into(
    model: &ModelSpec,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    s: &mut HamiltonianScratch,
    out: &mut [f64],
) {
    let (n, l) = (model.state_dim(), model.control_dim());
    model.cost_du(x, u, out);
    model.drift_du(x, u, &mut s.bu);
    add_mat_t_vec(&s.bu, p, out);
    model.diffusion_du(x, u, &mut s.su);
    for (i, block) in s.su.chunks(n * l).enumerate() {
        add_mat_t_vec(block, &q[i * n..(i + 1) * n], out);
    }
}

fn grad_x_into(
    model: &ModelSpec,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    s: &mut HamiltonianScratch,
    out: &mut [f64],
) {
    let n = model.state_dim();
    model.cost_dx(x, u, out);
    model.drift_dx(x, u, &mut s.bx);
    add_mat_t_vec(&s.bx, p, out);
    model.diffusion_dx(x, u, &mut s.sx);
    for (i, block) in s.sx.chunks(n * n).enumerate() {
        add_mat_t_vec(block, &q[i * n..(i + 1) * n], out);
    }
}

pub fn grad_u_hamiltonian(model: &ModelSpec, x: &[f64], u: &[f64], p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.control_dim()];
    grad_u_into(model, x, u, p, q, &mut HamiltonianScratch::new(model), &mut out);
    out
}

/// Symmetrized `(x, u)`-Hessian of `H` from central differences of the
/// analytic gradient, `(n + l)²` row-major with `x` first.
pub fn hamiltonian_hessian(model: &ModelSpec, x: &[f64], u: &[f64], p: &[f64], q: &[f64]) -> Vec<f64> {
    let (n, l) = (model.state_dim(), model.control_dim());
    let m = n + l;
    let mut s = HamiltonianScratch::new(model);
    let grad = |z: &[f64], s: &mut HamiltonianScratch| {
        let mut g = vec![0.0; m];
        let (gx, gu) = g.split_at_mut(n);
        grad_x_into(model, &z[..n], &z[n..], p, q, s, gx);
        grad_u_into(model, &z[..n], &z[n..], p, q, s, gu);
        g
    };
    let mut z: Vec<f64> = x.iter().chain(u).copied().collect();
    let mut h = vec![0.0; m * m];
    for c in 0..m {
        let h_c = FD_STEP * (1.0 + z[c].abs());
        let z0 = z[c];
        z[c] = z0 + h_c;
        let gp = grad(&z, &mut s);
        z[c] = z0 - h_c;
        let gm = grad(&z, &mut s);
        z[c] = z0;
        for r in 0..m {
            h[r * m + c] = (gp[r] - gm[r]) / (2.0 * h_c);
        }
    }
    for r in 0..m {
        for c in 0..r {
            let v = 0.5 * (h[r * m + c] + h[c * m + r]);
            h[r * m + c] = v;
            h[c * m + r] = v;
        }
    }
    h
}

/// Horizon and sampling parameters shared by the optimality checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpSettings {
    pub x0: Vec<f64>,
    /// Reported horizon `T`.
    pub horizon: f64,
    /// Discarded tail after `T`; `0` gives the truncated condition with
    /// `ν = 0` at `T` itself.
    pub buffer: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub window: f64,
    pub basis: RegressionBasis,
}

impl SmpSettings {
    pub fn new(x0: Vec<f64>, horizon: f64, dt: f64, paths: usize, seed: u64) -> Self {
        SmpSettings {
            x0,
            horizon,
            buffer: 4.0,
            dt,
            paths,
            seed,
            window: DEFAULT_WINDOW,
            basis: RegressionBasis::default(),
        }
    }
}

/// Base paths on `[0, T + buffer]`, the adjoint solved with `ν = 0` at the
/// end, and the step index of `T`.
pub(crate) struct AdjointRun {
    pub ensemble: PathEnsemble,
    pub solution: AdjointSolution,
    pub report_steps: usize,
}

pub(crate) fn simulate_with_buffer(model: &ModelSpec, law: &ControlLaw, s: &SmpSettings) -> Result<(PathEnsemble, usize)> {
    if s.buffer < 0.0 {
        return Err(invalid("buffer", "must be non-negative"));
    }
    let grid = TimeGrid::with_horizon(s.dt, s.horizon + s.buffer)?;
    let report_steps = grid.step_of(s.horizon)?;
    let ens = simulate_state(model, law, &s.x0, grid, s.paths, s.seed)?;
    Ok((ens, report_steps))
}

pub(crate) fn solve_run(model: &ModelSpec, law: &ControlLaw, s: &SmpSettings) -> Result<AdjointRun> {
    if s.buffer > 0.0 {
        check_buffer(model, s.buffer, s.seed)?;
    }
    let (ensemble, report_steps) = simulate_with_buffer(model, law, s)?;
    let solution = solve_adjoint_finite(model, &ensemble, law, s.basis, Terminal::Zero)?;
    Ok(AdjointRun {
        ensemble,
        solution,
        report_steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmpVerdict {
    Consistent,
    Violated,
}

/// Running averages `(1/T) Ê∫₀ᵀ ⟨D_u H, u − ū⟩ dt` for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub direction: String,
    pub control_id: String,
    pub checkpoints: Vec<(f64, f64)>,
    pub ci: Vec<f64>,
    pub tail_min: f64,
    pub tail_max: f64,
    pub tail_ci: f64,
    /// `max(0.01, 2 · tail_ci)`.
    pub tolerance: f64,
    pub verdict: SmpVerdict,
}

/// A named candidate control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub law: ControlLaw,
}

/// Constant shifts `ū ± e_j`, linear feedbacks `u = −G x` with `G` drawn
/// uniformly from `[−1, 1]` (each also with `−G`), and the sign flip `−ū`.
/// Every evaluation is projected into `U` by the laws themselves.
pub fn candidate_battery(model: &ModelSpec, u_bar: &ControlLaw, random_gains: usize, seed: u64) -> Vec<Candidate> {
    let (n, l) = (model.state_dim(), model.control_dim());
    let set = model.control_set();
    let mut out = Vec::new();
    for j in 0..l {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; l];
            e[j] = sign;
            out.push(Candidate {
                name: format!("shift{}e{}", if sign > 0.0 { '+' } else { '-' }, j + 1),
                law: u_bar.shifted(&e),
            });
        }
    }
    let mut rng = aux_stream(seed, 0x5350);
    for r in 0..random_gains {
        let g: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        for (tag, sign) in [("", 1.0), ("neg", -1.0)] {
            let gain = g.iter().map(|v| sign * v).collect();
            let law = ControlLaw::affine(set, n, gain, vec![0.0; l]).expect("gain shape");
            out.push(Candidate {
                name: format!("gain{r}{tag}"),
                law,
            });
        }
    }
    out.push(Candidate {
        name: "sign_flip".into(),
        law: u_bar.negated(),
    });
    out
}

/// Evaluates the variational inequality for every candidate on paths of
/// `ū` and the adjoint of `ū`.
pub fn evaluate_variational_inequality(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    candidates: &[Candidate],
    settings: &SmpSettings,
) -> Result<Vec<SmpReport>> {
    let run = solve_run(model, u_bar, settings)?;
    pair_candidates(model, u_bar, candidates, &run, settings.window)
}

fn pair_candidates(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    candidates: &[Candidate],
    run: &AdjointRun,
    window: f64,
) -> Result<Vec<SmpReport>> {
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    for c in candidates {
        crate::forward::check_law(model, &c.law)?;
    }
    let ens = &run.ensemble;
    let report_grid = TimeGrid::new(ens.grid.dt, run.report_steps)?;
    let steps = checkpoint_schedule(report_grid, window)?;
    let (nc, ns) = (candidates.len(), steps.len());
    let width = nc * ns;
    let mut totals = vec![0.0; ens.paths * width];
    if width > 0 {
        exec::for_each_chunk_mut(&mut totals, width * exec::CHUNK, |ci, chunk| {
            let mut ev = run.solution.evaluator();
            let mut hs = HamiltonianScratch::new(model);
            let (mut p, mut q) = (vec![0.0; n], vec![0.0; n * d]);
            let (mut ub, mut uc, mut g) = (vec![0.0; l], vec![0.0; l], vec![0.0; l]);
            let mut acc = vec![0.0; nc];
            for (off, row) in chunk.chunks_mut(width).enumerate() {
                let path = ci * exec::CHUNK + off;
                acc.fill(0.0);
                let mut next = 0;
                for k in 0..=run.report_steps {
                    while next < ns && steps[next] == k {
                        for c in 0..nc {
                            row[c * ns + next] = acc[c];
                        }
                        next += 1;
                    }
                    if k == run.report_steps {
                        break;
                    }
                    let t = ens.grid.time(k);
                    let x = ens.state(path, k);
                    u_bar.eval(t, x, &mut ub);
                    ev.p(path, k, x, &mut p);
                    ev.q(k, x, &mut q);
                    grad_u_into(model, x, &ub, &p, &q, &mut hs, &mut g);
                    for (c, cand) in candidates.iter().enumerate() {
                        cand.law.eval(t, x, &mut uc);
                        let v: f64 = g.iter().zip(uc.iter().zip(&ub)).map(|(gi, (a, b))| gi * (a - b)).sum();
                        acc[c] += ens.grid.dt * v;
                    }
                }
            }
        });
    }
    let mut reports = Vec::with_capacity(nc);
    let mut block = vec![0.0; ens.paths * ns];
    for (c, cand) in candidates.iter().enumerate() {
        for j in 0..ens.paths {
            block[j * ns..(j + 1) * ns].copy_from_slice(&totals[j * width + c * ns..j * width + (c + 1) * ns]);
        }
        let r = ErgodicCostReport::from_cumulative(report_grid, &steps, &block, ens.paths, window);
        let tolerance = MIN_TOLERANCE.max(2.0 * r.tail_ci);
        reports.push(SmpReport {
            direction: cand.name.clone(),
            control_id: cand.law.id(),
            verdict: if r.tail_min < -tolerance {
                SmpVerdict::Violated
            } else {
                SmpVerdict::Consistent
            },
            checkpoints: r.checkpoints,
            ci: r.ci,
            tail_min: r.tail_min,
            tail_max: r.tail_max,
            tail_ci: r.tail_ci,
            tolerance,
        });
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SufficiencyVerdict {
    Certified,
    NotCertified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    /// Smallest eigenvalue of the `(x, u)`-Hessian of `H` over the probes.
    pub convexity_min_eigen: f64,
    pub convexity_tolerance: f64,
    pub probes: usize,
    /// Smallest `tail_min` over the candidate battery.
    pub minimality_tail: f64,
    /// `max(0.01, 2 · largest tail_ci)` over the battery.
    pub minimality_tolerance: f64,
    pub worst_direction: String,
    pub verdict: SufficiencyVerdict,
    pub battery: Vec<SmpReport>,
}

/// Samples the Hessian of `H` at `probes` random on-path points in `[0, T)`
/// and runs the variational inequality against `candidates`.
pub fn check_sufficiency(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    candidates: &[Candidate],
    settings: &SmpSettings,
    probes: usize,
) -> Result<SufficiencyReport> {
    if probes == 0 {
        return Err(invalid("probes", "need at least one probe"));
    }
    let run = solve_run(model, u_bar, settings)?;
    let battery = pair_candidates(model, u_bar, candidates, &run, settings.window)?;
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let ens = &run.ensemble;
    let mut rng = aux_stream(settings.seed, 0x4845);
    let mut ev = run.solution.evaluator();
    let (mut p, mut q, mut ub) = (vec![0.0; n], vec![0.0; n * d], vec![0.0; l]);
    let mut min_eig = f64::INFINITY;
    for _ in 0..probes {
        let j = rng.gen_range(0..ens.paths);
        let k = rng.gen_range(0..run.report_steps);
        let x = ens.state(j, k);
        u_bar.eval(ens.grid.time(k), x, &mut ub);
        ev.p(j, k, x, &mut p);
        ev.q(k, x, &mut q);
        let h = hamiltonian_hessian(model, x, &ub, &p, &q);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n + l, n + l, &h));
        min_eig = min_eig.min(eig.eigenvalues.min());
    }
    let (worst, minimality_tail) = battery
        .iter()
        .map(|r| (r.direction.clone(), r.tail_min))
        .fold((String::new(), f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let minimality_tolerance = battery.iter().fold(MIN_TOLERANCE, |a, r| a.max(2.0 * r.tail_ci));
    let certified = min_eig >= -CONVEXITY_TOLERANCE && minimality_tail >= -minimality_tolerance;
    Ok(SufficiencyReport {
        convexity_min_eigen: min_eig,
        convexity_tolerance: CONVEXITY_TOLERANCE,
        probes,
        minimality_tail,
        minimality_tolerance,
        worst_direction: worst,
        verdict: if certified {
            SufficiencyVerdict::Certified
        } else {
            SufficiencyVerdict::NotCertified
        },
        battery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    const RICCATI: f64 = std::f64::consts::SQRT_2 - 1.0;

    #[test]
    fn lq_hamiltonian_values() {
        let m = ModelSpec::lq1();
        assert_eq!(hamiltonian(&m, &[0.0], &[0.0], &[0.0], &[0.0]), 0.0);
        assert_eq!(hamiltonian(&m, &[1.0], &[1.0], &[1.0], &[0.0]), 2.0);
        assert_eq!(hamiltonian(&m, &[1.0], &[0.0], &[1.0], &[1.0]), 1.0);
        assert_eq!(grad_u_hamiltonian(&m, &[1.0], &[0.0], &[1.0], &[0.0]), vec![1.0]);
        let x = 0.7;
        let g = grad_u_hamiltonian(&m, &[x], &[-RICCATI * x], &[2.0 * RICCATI * x], &[0.3]);
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = crate::model::diagnostics::tests::mixed_model();
        let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (x, u, p, q) = (draw(n), draw(l), draw(n), draw(n * d));
            let g = grad_u_hamiltonian(&model, &x, &u, &p, &q);
            for i in 0..l {
                let h = 1e-5;
                let (mut up, mut um) = (u.clone(), u.clone());
                up[i] += h;
                um[i] -= h;
                let fd = (hamiltonian(&model, &x, &up, &p, &q) - hamiltonian(&model, &x, &um, &p, &q)) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn lq_hessian_is_twice_identity() {
        let h = hamiltonian_hessian(&ModelSpec::lq1(), &[0.4], &[-0.2], &[1.3], &[0.5]);
        for (v, e) in h.iter().zip([2.0, 0.0, 0.0, 2.0]) {
            assert!((v - e).abs() < 1e-8, "{h:?}");
        }
    }

    #[test]
    fn battery_layout() {
        let m = ModelSpec::lq1();
        let u = ControlLaw::linear_feedback(m.control_set(), RICCATI);
        let b = candidate_battery(&m, &u, 3, 1);
        assert_eq!(b.len(), 2 + 6 + 1);
        assert_eq!(b[0].law.eval_vec(0.0, &[1.0]), vec![1.0 - RICCATI]);
        assert_eq!(b.last().unwrap().law.eval_vec(0.0, &[1.0]), vec![RICCATI]);
        assert_eq!(b, candidate_battery(&m, &u, 3, 1));
    }

    fn settings(paths: usize, seed: u64) -> SmpSettings {
        SmpSettings::new(vec![0.0], 10.0, 0.01, paths, seed)
    }

    #[test]
    fn zero_direction_gives_zero() {
        let m = ModelSpec::lq1();
        let u = ControlLaw::linear_feedback(m.control_set(), 0.3);
        let c = [Candidate {
            name: "same".into(),
            law: u.clone(),
        }];
        let r = evaluate_variational_inequality(&m, &u, &c, &settings(256, 1)).unwrap();
        assert!(r[0].checkpoints.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(r[0].verdict, SmpVerdict::Consistent);
    }

    #[test]
    fn zero_control_is_flagged_on_lq() {
        // D_u H = p = X under ū ≡ 0, so u = −0.4x pairs to −0.4 E X² → −0.2
        let m = ModelSpec::lq1();
        let u = ControlLaw::zero(m.control_set(), 1);
        let c = [Candidate {
            name: "gain".into(),
            law: ControlLaw::linear_feedback(m.control_set(), 0.4),
        }];
        let r = evaluate_variational_inequality(&m, &u, &c, &settings(2048, 2)).unwrap();
        assert_eq!(r[0].verdict, SmpVerdict::Violated);
        let last = r[0].checkpoints.last().unwrap().1;
        // (1/T)∫ −0.4 (1 − e^{−2t})/2 dt at T = 10
        let oracle = -0.2 * (1.0 - (1.0 - (-20.0f64).exp()) / 20.0);
        assert!((last - oracle).abs() < 0.02, "{last} vs {oracle}");
    }

    #[test]
    fn riccati_feedback_is_consistent_and_certified() {
        let m = ModelSpec::lq1();
        let u = ControlLaw::linear_feedback(m.control_set(), RICCATI);
        let battery = candidate_battery(&m, &u, 4, 3);
        let r = check_sufficiency(&m, &u, &battery, &settings(2048, 3), 50).unwrap();
        assert!(r.battery.iter().all(|b| b.verdict == SmpVerdict::Consistent), "{r:?}");
        assert!((r.convexity_min_eigen - 2.0).abs() < 1e-6);
        assert_eq!(r.verdict, SufficiencyVerdict::Certified);
    }

    #[test]
    fn affine_hamiltonian_passes_convexity() {
        let mut c = ModelConfig::lq1();
        c.q = vec![vec![0.0]];
        c.r = vec![vec![0.0]];
        let m = ModelSpec::new(c).unwrap();
        let u = ControlLaw::zero(m.control_set(), 1);
        let r = check_sufficiency(&m, &u, &candidate_battery(&m, &u, 1, 4), &settings(128, 4), 20).unwrap();
        assert!(r.convexity_min_eigen.abs() < 1e-9);
        assert_eq!(r.verdict, SufficiencyVerdict::Certified);
    }

    #[test]
    fn cubic_nonoptimal_control_is_not_certified() {
        let m = ModelSpec::cubic1();
        let u = ControlLaw::constant(m.control_set(), 1, vec![1.0]).unwrap();
        let s = SmpSettings::new(vec![0.0], 6.0, 0.01, 512, 5);
        let r = check_sufficiency(&m, &u, &candidate_battery(&m, &u, 2, 5), &s, 20).unwrap();
        assert!(r.minimality_tail < -r.minimality_tolerance, "{r:?}");
        assert_eq!(r.verdict, SufficiencyVerdict::NotCertified);
    }
}
