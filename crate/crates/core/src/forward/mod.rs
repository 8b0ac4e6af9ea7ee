//! Forward simulation on a shared Brownian basis.
//!
//! The state is advanced with a tamed Euler step
//! `X ← X + dt·b/(1 + dt|b|) + σ ΔW`, which stays stable for the polynomial
//! drifts of dissipative families. Every derived process (perturbed state,
//! first variation, affine dual) consumes the increments stored in the base
//! ensemble, so differences between them carry no independent sampling noise.

mod dual;
mod export;
mod moments;
mod variation;

pub use dual::{simulate_affine_dual, DualEnsemble, Forcing, InitialCondition};
pub use export::{read_binary, write_binary, write_csv};
pub use moments::{
    estimate_moment, fit_moment_bound, forgetting_rate, moment_profile, second_moment_profile,
    verify_expansion_residual, ExpansionReport, MomentBoundFit,
};
pub use variation::{simulate_first_variation, Direction, FirstVariationEnsemble};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::exec;
use crate::model::{ControlLaw, ModelSpec};
use crate::rng;

/// Uniform time grid on `[0, dt·steps]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("dt", "must be positive and finite"));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        Ok(TimeGrid { dt, steps })
    }

    /// Grid with `horizon / dt` steps; the ratio must be an integer.
    pub fn with_horizon(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > 0.0) {
            return Err(invalid("horizon", "dt and horizon must be positive"));
        }
        let steps = Self::steps_for(dt, horizon)?;
        Self::new(dt, steps)
    }

    fn steps_for(dt: f64, t: f64) -> Result<usize> {
        let k = (t / dt).round();
        if k < 0.0 || (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::OffGrid { t, dt });
        }
        Ok(k as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.dt * step as f64
    }

    /// Grid index of time `t`.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let k = Self::steps_for(self.dt, t)?;
        if k > self.steps {
            return Err(Error::OffGrid { t, dt: self.dt });
        }
        Ok(k)
    }
}

/// Read access shared by all path ensembles.
pub trait PathValues: Sync {
    fn grid(&self) -> TimeGrid;
    fn path_count(&self) -> usize;
    fn dim(&self) -> usize;
    /// First grid step with stored values.
    fn first_step(&self) -> usize {
        0
    }
    fn value(&self, path: usize, step: usize) -> &[f64];
}

/// `M` simulated trajectories plus the Brownian increments that drove them.
///
/// `states` is `M × (steps+1) × n` and `increments` is `M × steps × d`,
/// both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub paths: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub control_id: String,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let s = self.grid.steps + 1;
        let at = (path * s + step) * self.n;
        &self.states[at..at + self.n]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * self.grid.steps + step) * self.d;
        &self.increments[at..at + self.d]
    }

    /// The same paths restricted to the first `steps` grid steps.
    pub fn truncated(&self, steps: usize) -> Result<PathEnsemble> {
        if steps == 0 || steps > self.grid.steps {
            return Err(invalid("steps", "truncation must keep between 1 and all steps"));
        }
        let (n, d, s_old) = (self.n, self.d, self.grid.steps);
        let mut states = Vec::with_capacity(self.paths * (steps + 1) * n);
        let mut increments = Vec::with_capacity(self.paths * steps * d);
        for j in 0..self.paths {
            let at = j * (s_old + 1) * n;
            states.extend_from_slice(&self.states[at..at + (steps + 1) * n]);
            let at = j * s_old * d;
            increments.extend_from_slice(&self.increments[at..at + steps * d]);
        }
        Ok(PathEnsemble {
            grid: TimeGrid::new(self.grid.dt, steps)?,
            paths: self.paths,
            n,
            d,
            seed: self.seed,
            control_id: self.control_id.clone(),
            states,
            increments,
        })
    }

    /// Fails unless `other` was driven by the same noise on the same grid.
    pub fn ensure_same_noise(&self, other_grid: TimeGrid, other_paths: usize, other_seed: u64) -> Result<()> {
        if self.grid != other_grid || self.paths != other_paths || self.seed != other_seed {
            return Err(Error::EnsembleMismatch(format!(
                "grid/paths/seed ({:?}, {}, {}) vs ({:?}, {}, {})",
                self.grid, self.paths, self.seed, other_grid, other_paths, other_seed
            )));
        }
        Ok(())
    }
}

impl PathValues for PathEnsemble {
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
        self.state(path, step)
    }
}

/// How the control process is produced along a trajectory.
#[derive(Clone, Copy, Debug)]
pub enum ControlSource<'a> {
    /// Feedback evaluated at the current state.
    Feedback(&'a ControlLaw),
    /// The convex combination `ū_t + θ(u_t - ū_t)` of two laws, both
    /// evaluated along the trajectories of `base`.
    Perturbed {
        u_bar: &'a ControlLaw,
        u_alt: &'a ControlLaw,
        theta: f64,
        base: &'a PathEnsemble,
    },
}

impl ControlSource<'_> {
    /// Writes the control at `(path, step)` given the current state `x`.
    /// `scratch` needs the control dimension.
    pub fn eval(&self, path: usize, step: usize, t: f64, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match *self {
            ControlSource::Feedback(law) => law.eval(t, x, out),
            ControlSource::Perturbed {
                u_bar,
                u_alt,
                theta,
                base,
            } => {
                let xb = base.state(path, step);
                u_bar.eval(t, xb, out);
                u_alt.eval(t, xb, scratch);
                for (o, a) in out.iter_mut().zip(scratch.iter()) {
                    *o += theta * (a - *o);
                }
                u_bar.set.project_in_place(out);
            }
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ControlSource::Feedback(law) => law.control_dim(),
            ControlSource::Perturbed { u_bar, .. } => u_bar.control_dim(),
        }
    }
}

/// Scratch buffers for one tamed Euler step.
pub(crate) struct StepScratch {
    pub u: Vec<f64>,
    pub u2: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StepScratch {
    pub fn new(model: &ModelSpec) -> Self {
        let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
        StepScratch {
            u: vec![0.0; l],
            u2: vec![0.0; l],
            b: vec![0.0; n],
            sigma: vec![0.0; n * d],
        }
    }
}

/// One tamed Euler step with control `s.u` already set.
pub(crate) fn tamed_step(model: &ModelSpec, x: &[f64], dw: &[f64], dt: f64, s: &mut StepScratch, next: &mut [f64]) {
    let d = dw.len();
    model.drift(x, &s.u, &mut s.b);
    model.diffusion(x, &s.u, &mut s.sigma);
    let norm = s.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tame = dt / (1.0 + dt * norm);
    for (i, nx) in next.iter_mut().enumerate() {
        let mut noise = 0.0;
        for c in 0..d {
            noise += s.sigma[i * d + c] * dw[c];
        }
        *nx = x[i] + tame * s.b[i] + noise;
    }
}

fn generate_increments(grid: TimeGrid, paths: usize, d: usize, seed: u64) -> Vec<f64> {
    let per_path = grid.steps * d;
    let mut inc = vec![0.0; paths * per_path];
    exec::for_each_chunk_mut(&mut inc, per_path * exec::CHUNK, |ci, chunk| {
        for (off, row) in chunk.chunks_mut(per_path).enumerate() {
            let path = ci * exec::CHUNK + off;
            rng::fill_increments(&mut rng::path_stream(seed, path), grid.dt, row);
        }
    });
    inc
}

/// Integrates the state along all paths with the given increments.
fn integrate(
    model: &ModelSpec,
    source: &ControlSource,
    initial: &(dyn Fn(usize) -> Vec<f64> + Sync),
    grid: TimeGrid,
    paths: usize,
    increments: &[f64],
) -> Result<Vec<f64>> {
    let n = model.state_dim();
    let d = model.noise_dim();
    let stride = (grid.steps + 1) * n;
    let mut states = vec![0.0; paths * stride];
    exec::try_for_each_chunk_mut(&mut states, stride * exec::CHUNK, |ci, chunk| {
        let mut s = StepScratch::new(model);
        for (off, row) in chunk.chunks_mut(stride).enumerate() {
            let path = ci * exec::CHUNK + off;
            row[..n].copy_from_slice(&initial(path));
            let inc = &increments[path * grid.steps * d..(path + 1) * grid.steps * d];
            for k in 0..grid.steps {
                let (head, tail) = row.split_at_mut((k + 1) * n);
                let x = &head[k * n..];
                source.eval(path, k, grid.time(k), x, &mut s.u, &mut s.u2);
                let next = &mut tail[..n];
                tamed_step(model, x, &inc[k * d..(k + 1) * d], grid.dt, &mut s, next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { path, step: k + 1 });
                }
            }
        }
        Ok(())
    })?;
    Ok(states)
}

/// Simulates `paths` trajectories from `x0` under a feedback law.
pub fn simulate_state(
    model: &ModelSpec,
    control: &ControlLaw,
    x0: &[f64],
    grid: TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(Error::Shape {
            what: "x0".into(),
            expected: n,
            got: x0.len(),
        });
    }
    ensure_finite("x0", x0)?;
    if paths == 0 {
        return Err(invalid("paths", "must be at least 1"));
    }
    check_law(model, control)?;
    let increments = generate_increments(grid, paths, model.noise_dim(), seed);
    let states = integrate(
        model,
        &ControlSource::Feedback(control),
        &|_| x0.to_vec(),
        grid,
        paths,
        &increments,
    )?;
    Ok(PathEnsemble {
        grid,
        paths,
        n,
        d: model.noise_dim(),
        seed,
        control_id: control.id(),
        states,
        increments,
    })
}

pub(crate) fn check_law(model: &ModelSpec, law: &ControlLaw) -> Result<()> {
    if law.state_dim != model.state_dim() || law.control_dim() != model.control_dim() {
        return Err(invalid("control", "law dimensions do not match the model"));
    }
    if &law.set != model.control_set() {
        return Err(invalid("control", "law is not projected onto the model's control set"));
    }
    Ok(())
}

pub(crate) fn check_base(base: &PathEnsemble, u_bar: &ControlLaw) -> Result<()> {
    if base.control_id != u_bar.id() {
        return Err(Error::EnsembleMismatch(format!(
            "base ensemble was generated under {}, not {}",
            base.control_id,
            u_bar.id()
        )));
    }
    Ok(())
}

/// Simulates `X^θ` under `ū + θ(u - ū)` with the increments of `base`.
pub fn simulate_perturbed(
    model: &ModelSpec,
    u_bar: &ControlLaw,
    u_alt: &ControlLaw,
    theta: f64,
    base: &PathEnsemble,
) -> Result<PathEnsemble> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(invalid("theta", "must lie in [0, 1]"));
    }
    check_law(model, u_bar)?;
    check_law(model, u_alt)?;
    check_base(base, u_bar)?;
    if base.n != model.state_dim() || base.d != model.noise_dim() {
        return Err(Error::EnsembleMismatch("base ensemble dimensions".into()));
    }
    let source = ControlSource::Perturbed {
        u_bar,
        u_alt,
        theta,
        base,
    };
    let states = integrate(
        model,
        &source,
        &|path| base.state(path, 0).to_vec(),
        base.grid,
        base.paths,
        &base.increments,
    )?;
    Ok(PathEnsemble {
        grid: base.grid,
        paths: base.paths,
        n: base.n,
        d: base.d,
        seed: base.seed,
        control_id: format!("{}+{}*({})", u_bar.id(), theta, u_alt.id()),
        states,
        increments: base.increments.clone(),
    })
}
