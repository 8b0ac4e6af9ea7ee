//! Controlled SDE problem instances.
//!
//! A model is `dX = b(X,u) dt + σ(X,u) dW` with running cost `f(X,u)` and a
//! closed convex control set `U ⊂ R^l`. Two built-in families are provided:
//!
//! * `lq`: `b = A x + B u`, `f = xᵀQx + uᵀRu + c₀`;
//! * `cubic`: the `lq` drift plus componentwise damping `-c ∘ x³`.
//!
//! Both accept a diffusion whose noise channel `i` (column `σⁱ`) is affine,
//! `σⁱ(x,u) = s⁰ᵢ + Sˣᵢ x + Sᵘᵢ u`; with `Sˣ = Sᵘ = 0` the noise is additive.
//!
//! The structural constants `(m, p, k)` must satisfy `p > max(4m+2, 4)` and
//! `k > (p-1)/2`.

mod control;
pub(crate) mod diagnostics;
mod set;

pub use control::{ControlKind, ControlLaw};
pub use diagnostics::{check_derivatives, check_dissipativity, DissipativityReport};
pub use set::{unit_vector, ConvexSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lq,
    Cubic,
}

impl Family {
    /// Default `(m, p, k)` for the family.
    pub fn default_constants(self) -> (u32, f64, f64) {
        match self {
            Family::Lq => (0, 6.0, 3.0),
            Family::Cubic => (1, 8.0, 4.0),
        }
    }
}

/// Serializable description of a model; the file schema of problem configs.
///
/// Matrices are given as lists of rows. `sigma_x` / `sigma_u` hold one
/// matrix per noise channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cubic: Option<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_u: Option<Vec<Vec<Vec<f64>>>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub control_set: ConvexSet,
}

impl ModelConfig {
    /// Scalar LQ model: `b = -x + u`, `σ = 1`, `f = x² + u²`, `U = [-5, 5]`.
    pub fn lq1() -> Self {
        ModelConfig {
            family: Family::Lq,
            n: 1,
            d: 1,
            l: 1,
            a: vec![vec![-1.0]],
            b: vec![vec![1.0]],
            cubic: None,
            sigma: vec![vec![1.0]],
            sigma_x: None,
            sigma_u: None,
            q: vec![vec![1.0]],
            r: vec![vec![1.0]],
            cost_offset: None,
            m: None,
            p: None,
            k: None,
            control_set: ConvexSet::interval(-5.0, 5.0),
        }
    }

    /// Scalar cubic model: `b = -x³ - x + u`, otherwise as [`ModelConfig::lq1`].
    pub fn cubic1() -> Self {
        ModelConfig {
            family: Family::Cubic,
            cubic: Some(vec![1.0]),
            ..Self::lq1()
        }
    }

    /// Fills defaulted fields so that equal models compare equal.
    pub fn normalized(&self) -> Self {
        let (m, p, k) = self.family.default_constants();
        let mut c = self.clone();
        c.m = Some(self.m.unwrap_or(m));
        c.p = Some(self.p.unwrap_or(p));
        c.k = Some(self.k.unwrap_or(k));
        c.cost_offset = Some(self.cost_offset.unwrap_or(0.0));
        c
    }
}

/// A validated model with flattened row-major coefficients.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    config: ModelConfig,
    n: usize,
    d: usize,
    l: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    cubic: Vec<f64>,
    sigma: Vec<f64>,
    sigma_x: Vec<f64>,
    sigma_u: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    q_sym: Vec<f64>,
    r_sym: Vec<f64>,
    cost_offset: f64,
    multiplicative: bool,
    m: u32,
    p: f64,
    k: f64,
}

/// All coefficient values and first derivatives at one `(x, u)`.
///
/// Layouts (row-major): `drift_du` is `n×l`; `diffusion` is `n×d` with
/// column `i` the channel `σⁱ`; `diffusion_dx[i]` is the `n×n` Jacobian
/// of `σⁱ`; `diffusion_du[i]` is the `n×l` control Jacobian of `σⁱ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelEval {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub cost: f64,
    pub drift_dx: Vec<f64>,
    pub drift_du: Vec<f64>,
    pub diffusion_dx: Vec<Vec<f64>>,
    pub diffusion_du: Vec<Vec<f64>>,
    pub cost_dx: Vec<f64>,
    pub cost_du: Vec<f64>,
}

fn flatten(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Vec<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(name, format!("expected a {nrows}x{ncols} matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(invalid(name, "entries must be finite"));
    }
    Ok(flat)
}

fn flatten_channels(
    name: &str,
    mats: &Option<Vec<Vec<Vec<f64>>>>,
    d: usize,
    nrows: usize,
    ncols: usize,
) -> Result<Vec<f64>> {
    match mats {
        None => Ok(vec![0.0; d * nrows * ncols]),
        Some(ms) => {
            if ms.len() != d {
                return Err(invalid(name, format!("expected one matrix per noise channel ({d})")));
            }
            let mut out = Vec::with_capacity(d * nrows * ncols);
            for m in ms {
                out.extend(flatten(name, m, nrows, ncols)?);
            }
            Ok(out)
        }
    }
}

fn min_sym_eigenvalue(m: &[f64], dim: usize) -> f64 {
    let mat = nalgebra::DMatrix::from_fn(dim, dim, |i, j| 0.5 * (m[i * dim + j] + m[j * dim + i]));
    mat.symmetric_eigenvalues().min()
}

impl ModelSpec {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let config = config.normalized();
        let (n, d, l) = (config.n, config.d, config.l);
        if n == 0 || d == 0 || l == 0 {
            return Err(Error::InvalidModel("n, d and l must be at least 1".into()));
        }
        let m = config.m.unwrap();
        let p = config.p.unwrap();
        let k = config.k.unwrap();
        let p_min = f64::max(4.0 * m as f64 + 2.0, 4.0);
        if !(p > p_min) {
            return Err(Error::InvalidModel(format!(
                "moment order p = {p} must exceed max(4m+2, 4) = {p_min}"
            )));
        }
        if !(k > (p - 1.0) / 2.0) {
            return Err(Error::InvalidModel(format!(
                "dissipativity weight k = {k} must exceed (p-1)/2 = {}",
                (p - 1.0) / 2.0
            )));
        }
        let a = flatten("a", &config.a, n, n)?;
        let b = flatten("b", &config.b, n, l)?;
        let sigma = flatten("sigma", &config.sigma, n, d)?;
        let sigma_x = flatten_channels("sigma_x", &config.sigma_x, d, n, n)?;
        let sigma_u = flatten_channels("sigma_u", &config.sigma_u, d, n, l)?;
        let q = flatten("q", &config.q, n, n)?;
        let r = flatten("r", &config.r, l, l)?;
        let cubic = match (config.family, &config.cubic) {
            (Family::Lq, None) => vec![0.0; n],
            (Family::Lq, Some(_)) => {
                return Err(invalid("cubic", "only the cubic family takes cubic coefficients"))
            }
            (Family::Cubic, None) => return Err(invalid("cubic", "required for the cubic family")),
            (Family::Cubic, Some(c)) => {
                if c.len() != n || c.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid("cubic", format!("need {n} finite nonnegative entries")));
                }
                if m < 1 {
                    return Err(invalid("m", "cubic drift has growth degree 3 and needs m >= 1"));
                }
                c.clone()
            }
        };
        let multiplicative = sigma_x.iter().any(|v| *v != 0.0);
        if multiplicative && m < 1 {
            return Err(invalid("m", "state-dependent diffusion needs m >= 1"));
        }
        let cost_offset = config.cost_offset.unwrap();
        if !cost_offset.is_finite() {
            return Err(invalid("cost_offset", "must be finite"));
        }
        // The running cost must be bounded below.
        if min_sym_eigenvalue(&q, n) < -1e-12 || min_sym_eigenvalue(&r, l) < -1e-12 {
            return Err(Error::InvalidModel(
                "cost matrices q and r must be positive semidefinite".into(),
            ));
        }
        config.control_set.validate(l)?;

        let q_sym = (0..n * n).map(|ij| q[ij] + q[(ij % n) * n + ij / n]).collect();
        let r_sym = (0..l * l).map(|ij| r[ij] + r[(ij % l) * l + ij / l]).collect();
        Ok(ModelSpec {
            n,
            d,
            l,
            a,
            b,
            cubic,
            sigma,
            sigma_x,
            sigma_u,
            q,
            r,
            q_sym,
            r_sym,
            cost_offset,
            multiplicative,
            m,
            p,
            k,
            config,
        })
    }

    pub fn lq1() -> Self {
        Self::new(ModelConfig::lq1()).expect("builtin model")
    }

    pub fn cubic1() -> Self {
        Self::new(ModelConfig::cubic1()).expect("builtin model")
    }

    /// Normalized configuration this model was built from.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }
    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn noise_dim(&self) -> usize {
        self.d
    }
    pub fn control_dim(&self) -> usize {
        self.l
    }
    pub fn control_set(&self) -> &ConvexSet {
        &self.config.control_set
    }
    pub fn growth_exponent(&self) -> u32 {
        self.m
    }
    pub fn moment_order(&self) -> f64 {
        self.p
    }
    pub fn dissipativity_weight(&self) -> f64 {
        self.k
    }
    /// True when some `σⁱ` depends on the state.
    pub fn has_multiplicative_noise(&self) -> bool {
        self.multiplicative
    }

    /// Lower bound of the running cost (`q`, `r` are PSD).
    pub fn cost_lower_bound(&self) -> f64 {
        self.cost_offset
    }

    /// True when `D_x f ≡ 0`.
    pub fn cost_is_state_free(&self) -> bool {
        self.q_sym.iter().all(|v| *v == 0.0)
    }

    pub fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (n, l) = (self.n, self.l);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.a[i * n + j] * x[j];
            }
            for j in 0..l {
                s += self.b[i * l + j] * u[j];
            }
            out[i] = s - self.cubic[i] * x[i] * x[i] * x[i];
        }
    }

    pub fn drift_dx(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.copy_from_slice(&self.a);
        for i in 0..n {
            out[i * n + i] -= 3.0 * self.cubic[i] * x[i] * x[i];
        }
    }

    pub fn drift_du(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
    }

    /// `σ(x,u)` as an `n×d` row-major matrix.
    pub fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (n, d, l) = (self.n, self.d, self.l);
        out.copy_from_slice(&self.sigma);
        for i in 0..d {
            let sx = &self.sigma_x[i * n * n..(i + 1) * n * n];
            let su = &self.sigma_u[i * n * l..(i + 1) * n * l];
            for r in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    s += sx[r * n + c] * x[c];
                }
                for c in 0..l {
                    s += su[r * l + c] * u[c];
                }
                out[r * d + i] += s;
            }
        }
    }

    /// Jacobians `D_x σⁱ`, channel-major: `d` blocks of `n×n`.
    pub fn diffusion_dx(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma_x);
    }

    /// Jacobians `D_u σⁱ`, channel-major: `d` blocks of `n×l`.
    pub fn diffusion_du(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma_u);
    }

    pub fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        quad_form(&self.q, x) + quad_form(&self.r, u) + self.cost_offset
    }

    pub fn cost_dx(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        mat_vec(&self.q_sym, x, out);
    }

    pub fn cost_du(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        mat_vec(&self.r_sym, u, out);
    }

    /// Evaluates every coefficient and derivative after validating the inputs.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<ModelEval> {
        let (n, d, l) = (self.n, self.d, self.l);
        if x.len() != n {
            return Err(Error::Shape {
                what: "state".into(),
                expected: n,
                got: x.len(),
            });
        }
        if u.len() != l {
            return Err(Error::Shape {
                what: "control".into(),
                expected: l,
                got: u.len(),
            });
        }
        ensure_finite("state", x)?;
        ensure_finite("control", u)?;
        if !self.control_set().contains(u, 1e-12) {
            return Err(Error::ControlOutsideSet { value: u.to_vec() });
        }
        let mut e = ModelEval {
            drift: vec![0.0; n],
            diffusion: vec![0.0; n * d],
            cost: self.cost(x, u),
            drift_dx: vec![0.0; n * n],
            drift_du: vec![0.0; n * l],
            diffusion_dx: Vec::with_capacity(d),
            diffusion_du: Vec::with_capacity(d),
            cost_dx: vec![0.0; n],
            cost_du: vec![0.0; l],
        };
        self.drift(x, u, &mut e.drift);
        self.diffusion(x, u, &mut e.diffusion);
        self.drift_dx(x, u, &mut e.drift_dx);
        self.drift_du(x, u, &mut e.drift_du);
        let mut sx = vec![0.0; d * n * n];
        let mut su = vec![0.0; d * n * l];
        self.diffusion_dx(x, u, &mut sx);
        self.diffusion_du(x, u, &mut su);
        e.diffusion_dx = sx.chunks(n * n).map(<[f64]>::to_vec).collect();
        e.diffusion_du = su.chunks(n * l).map(<[f64]>::to_vec).collect();
        self.cost_dx(x, u, &mut e.cost_dx);
        self.cost_du(x, u, &mut e.cost_du);
        Ok(e)
    }

    /// Returns a copy with every diffusion coefficient set to zero.
    pub fn without_noise(&self) -> Self {
        let mut c = self.config.clone();
        c.sigma = vec![vec![0.0; self.d]; self.n];
        c.sigma_x = None;
        c.sigma_u = None;
        Self::new(c).expect("noise removal keeps a valid model")
    }
}

pub(crate) fn mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * cols..(i + 1) * cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// `out += mᵀ y` for `m` with `y.len()` rows.
pub(crate) fn add_mat_t_vec(m: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += m[r * cols + c] * yr;
        }
    }
}

fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * m[i * n + j] * x[j];
        }
    }
    s
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lq1_at_origin() {
        let e = ModelSpec::lq1().eval(&[0.0], &[0.0]).unwrap();
        assert_eq!(e.drift, vec![0.0]);
        assert_eq!(e.cost, 0.0);
        assert_eq!(e.drift_dx, vec![-1.0]);
        assert_eq!(e.drift_du, vec![1.0]);
        assert_eq!(e.diffusion_dx, vec![vec![0.0]]);
        assert_eq!(e.cost_dx, vec![0.0]);
    }

    #[test]
    fn cubic1_drift_and_jacobian() {
        let e = ModelSpec::cubic1().eval(&[2.0], &[0.0]).unwrap();
        assert_eq!(e.drift, vec![-10.0]);
        assert_eq!(e.drift_dx, vec![-13.0]);
    }

    #[test]
    fn lq1_cost_and_control_gradient() {
        let e = ModelSpec::lq1().eval(&[1.0], &[3.0]).unwrap();
        assert_eq!(e.cost, 10.0);
        assert_eq!(e.cost_du, vec![6.0]);
    }

    #[test]
    fn eval_rejects_bad_inputs() {
        let m = ModelSpec::lq1();
        assert!(matches!(m.eval(&[f64::NAN], &[0.0]), Err(Error::NonFinite { .. })));
        assert!(matches!(m.eval(&[0.0], &[6.0]), Err(Error::ControlOutsideSet { .. })));
    }

    #[test]
    fn structural_constants_are_validated() {
        let mut c = ModelConfig::lq1();
        c.p = Some(4.0);
        assert!(ModelSpec::new(c.clone()).is_err());
        c.p = Some(4.5);
        c.k = Some(1.75);
        assert!(ModelSpec::new(c.clone()).is_err());
        c.k = Some(1.76);
        assert!(ModelSpec::new(c).is_ok());
        let mut c = ModelConfig::cubic1();
        c.m = Some(1);
        c.p = Some(6.0);
        assert!(ModelSpec::new(c).is_err(), "p must exceed 4m+2 = 6");
    }

    #[test]
    fn indefinite_cost_is_rejected() {
        let mut c = ModelConfig::lq1();
        c.q = vec![vec![-1.0]];
        assert!(ModelSpec::new(c).is_err());
    }

}
