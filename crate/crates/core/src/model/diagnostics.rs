//! Randomized checks of the standing hypotheses.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{unit_vector, ModelSpec};
use crate::rng::aux_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    /// Max over probes of `(⟨D_x b y, y⟩ + k Σᵢ |D_x σⁱ y|²) / |y|²`.
    pub sampled_max: f64,
    /// Sampled estimate of the dissipativity constant `c_p`.
    pub c_p: f64,
    pub pass: bool,
    pub probe_count: usize,
}

/// Probes joint dissipativity with `x ~ N(0, 3²)`, `u` uniform on `U` and `y`
/// uniform on the unit sphere. A failing model yields `pass = false`.
pub fn check_dissipativity(model: &ModelSpec, probes: usize, seed: u64) -> DissipativityReport {
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let k = model.dissipativity_weight();
    let mut rng = aux_stream(seed, 0xD155);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let mut jac = vec![0.0; n * n];
    let mut sx = vec![0.0; d * n * n];
    let mut by = vec![0.0; n];
    let mut max = f64::NEG_INFINITY;
    let probes = probes.max(1);
    for _ in 0..probes {
        let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let u = if l > 0 {
            model.control_set().sample(&mut rng)
        } else {
            Vec::new()
        };
        let y = unit_vector(&mut rng, n);
        model.drift_dx(&x, &u, &mut jac);
        model.diffusion_dx(&x, &u, &mut sx);
        super::mat_vec(&jac, &y, &mut by);
        let mut val = super::dot(&by, &y);
        for i in 0..d {
            super::mat_vec(&sx[i * n * n..(i + 1) * n * n], &y, &mut by);
            val += k * super::dot(&by, &by);
        }
        max = max.max(val);
    }
    DissipativityReport {
        sampled_max: max,
        c_p: max,
        pass: max < 0.0,
        probe_count: probes,
    }
}

/// Largest relative error `|analytic - fd| / max(1, |analytic|)` between the
/// analytic first derivatives and central differences with step `h`, over
/// `probes` random points (`x` uniform in `[-3, 3]ⁿ`, `u` uniform on `U`).
///
/// Control derivatives are differenced on the unconstrained formulas so
/// probes near the boundary of `U` are fine.
pub fn check_derivatives(model: &ModelSpec, probes: usize, seed: u64, h: f64) -> f64 {
    let (n, d, l) = (model.state_dim(), model.noise_dim(), model.control_dim());
    let mut rng = aux_stream(seed, 0xDE41);
    let mut worst: f64 = 0.0;
    let mut rel = |a: f64, fd: f64| {
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    };
    let (mut bj, mut bu) = (vec![0.0; n * n], vec![0.0; n * l]);
    let (mut sj, mut su) = (vec![0.0; d * n * n], vec![0.0; d * n * l]);
    let (mut fx, mut fu) = (vec![0.0; n], vec![0.0; l]);
    let (mut b_p, mut b_m) = (vec![0.0; n], vec![0.0; n]);
    let (mut s_p, mut s_m) = (vec![0.0; n * d], vec![0.0; n * d]);
    for _ in 0..probes {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let u = model.control_set().sample(&mut rng);
        model.drift_dx(&x, &u, &mut bj);
        model.drift_du(&x, &u, &mut bu);
        model.diffusion_dx(&x, &u, &mut sj);
        model.diffusion_du(&x, &u, &mut su);
        model.cost_dx(&x, &u, &mut fx);
        model.cost_du(&x, &u, &mut fu);
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            model.drift(&xp, &u, &mut b_p);
            model.drift(&xm, &u, &mut b_m);
            model.diffusion(&xp, &u, &mut s_p);
            model.diffusion(&xm, &u, &mut s_m);
            for i in 0..n {
                rel(bj[i * n + j], (b_p[i] - b_m[i]) / (2.0 * h));
                for c in 0..d {
                    rel(
                        sj[c * n * n + i * n + j],
                        (s_p[i * d + c] - s_m[i * d + c]) / (2.0 * h),
                    );
                }
            }
            rel(fx[j], (model.cost(&xp, &u) - model.cost(&xm, &u)) / (2.0 * h));
        }
        for j in 0..l {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            model.drift(&x, &up, &mut b_p);
            model.drift(&x, &um, &mut b_m);
            model.diffusion(&x, &up, &mut s_p);
            model.diffusion(&x, &um, &mut s_m);
            for i in 0..n {
                rel(bu[i * l + j], (b_p[i] - b_m[i]) / (2.0 * h));
                for c in 0..d {
                    rel(
                        su[c * n * l + i * l + j],
                        (s_p[i * d + c] - s_m[i * d + c]) / (2.0 * h),
                    );
                }
            }
            rel(fu[j], (model.cost(&x, &up) - model.cost(&x, &um)) / (2.0 * h));
        }
    }
    worst
}
