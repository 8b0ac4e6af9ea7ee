use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Closed convex control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConvexSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl ConvexSet {
    pub fn interval(lower: f64, upper: f64) -> Self {
        ConvexSet::Box {
            lower: vec![lower],
            upper: vec![upper],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                if lower.len() != l || upper.len() != l {
                    return Err(invalid(
                        "control_set",
                        format!("box bounds must have length l = {l}"),
                    ));
                }
                for (i, (lo, hi)) in lower.iter().zip(upper).enumerate() {
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(invalid("control_set", format!("bound {i} is not finite")));
                    }
                    if lo > hi {
                        return Err(invalid(
                            "control_set",
                            format!("bounds reversed in coordinate {i}: lower {lo} > upper {hi}"),
                        ));
                    }
                }
            }
            ConvexSet::Ball { center, radius } => {
                if center.len() != l {
                    return Err(invalid(
                        "control_set",
                        format!("ball center must have length l = {l}"),
                    ));
                }
                if center.iter().any(|c| !c.is_finite()) || !radius.is_finite() || *radius < 0.0 {
                    return Err(invalid(
                        "control_set",
                        "ball needs a finite center and a finite radius >= 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Euclidean projection, in place.
    pub fn project_in_place(&self, u: &mut [f64]) {
        match self {
            ConvexSet::Box { lower, upper } => {
                for ((v, lo), hi) in u.iter_mut().zip(lower).zip(upper) {
                    *v = v.clamp(*lo, *hi);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let dist2: f64 = u.iter().zip(center).map(|(v, c)| (v - c) * (v - c)).sum();
                if dist2 > radius * radius {
                    let scale = radius / dist2.sqrt();
                    for (v, c) in u.iter_mut().zip(center) {
                        *v = c + (*v - c) * scale;
                    }
                }
            }
        }
    }

    pub fn project(&self, u_raw: &[f64]) -> Vec<f64> {
        let mut u = u_raw.to_vec();
        self.project_in_place(&mut u);
        u
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match self {
            ConvexSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol),
            ConvexSet::Ball { center, radius } => {
                let dist2: f64 = u.iter().zip(center).map(|(v, c)| (v - c) * (v - c)).sum();
                dist2.sqrt() <= radius + tol
            }
        }
    }

    /// Uniform sample from the set (used for probing).
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..=*hi) } else { *lo })
                .collect(),
            ConvexSet::Ball { center, radius } => {
                let l = center.len();
                let dir = unit_vector(rng, l);
                let r = radius * rng.gen::<f64>().powf(1.0 / l as f64);
                center.iter().zip(dir).map(|(c, e)| c + r * e).collect()
            }
        }
    }
}

/// Uniformly distributed point on the unit sphere in `dim` dimensions.
pub fn unit_vector<R: rand::Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_projection_examples() {
        let set = ConvexSet::interval(-5.0, 5.0);
        assert_eq!(set.project(&[3.0]), vec![3.0]);
        assert_eq!(set.project(&[7.0]), vec![5.0]);
    }

    #[test]
    fn ball_projection_rescales_radially() {
        let set = ConvexSet::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        let p = set.project(&[3.0, 4.0]);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn reversed_bounds_are_rejected() {
        let set = ConvexSet::interval(1.0, -1.0);
        assert!(set.validate(1).is_err());
    }

    fn sets() -> impl Strategy<Value = ConvexSet> {
        prop_oneof![
            prop::collection::vec((-3.0..3.0f64, 0.0..4.0f64), 2).prop_map(|b| ConvexSet::Box {
                lower: b.iter().map(|(lo, _)| *lo).collect(),
                upper: b.iter().map(|(lo, w)| lo + w).collect(),
            }),
            (prop::collection::vec(-3.0..3.0f64, 2), 0.0..4.0f64)
                .prop_map(|(center, radius)| ConvexSet::Ball { center, radius }),
        ]
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_nonexpansive(
            set in sets(),
            a in prop::collection::vec(-20.0..20.0f64, 2),
            b in prop::collection::vec(-20.0..20.0f64, 2),
        ) {
            let pa = set.project(&a);
            let pb = set.project(&b);
            prop_assert!(set.contains(&pa, 1e-9));
            let ppa = set.project(&pa);
            for (x, y) in pa.iter().zip(&ppa) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
            let dp: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dp <= d + 1e-12);
        }
    }
}
