use serde::{Deserialize, Serialize};

use super::ConvexSet;
use crate::error::{invalid, Result};

/// Parametrization of a feedback control law.
///
/// Affine laws use the regulator convention `u = -K x + c`, with the gain
/// `K` stored row-major as `l×n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlKind {
    Constant {
        value: Vec<f64>,
    },
    AffineFeedback {
        gain: Vec<f64>,
        offset: Vec<f64>,
    },
    /// Piecewise-constant on a rectangular grid of state cells. States
    /// outside `[lower, upper]` use the nearest boundary cell.
    TabulatedFeedback {
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: Vec<usize>,
        values: Vec<f64>,
    },
    /// `before` on `[0, switch_time)`, `after` from then on.
    Switched {
        before: Box<ControlLaw>,
        after: Box<ControlLaw>,
        switch_time: f64,
    },
}

/// An admissible control: every evaluation is projected into its set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw {
    pub kind: ControlKind,
    pub set: ConvexSet,
    pub state_dim: usize,
}

impl ControlLaw {
    pub fn constant(set: &ConvexSet, state_dim: usize, value: Vec<f64>) -> Result<Self> {
        let law = ControlLaw {
            kind: ControlKind::Constant { value },
            set: set.clone(),
            state_dim,
        };
        law.validate()?;
        Ok(law)
    }

    /// `u = -gain x + offset`.
    pub fn affine(set: &ConvexSet, state_dim: usize, gain: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let law = ControlLaw {
            kind: ControlKind::AffineFeedback { gain, offset },
            set: set.clone(),
            state_dim,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn tabulated(
        set: &ConvexSet,
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let law = ControlLaw {
            state_dim: lower.len(),
            kind: ControlKind::TabulatedFeedback {
                lower,
                upper,
                bins,
                values,
            },
            set: set.clone(),
        };
        law.validate()?;
        Ok(law)
    }

    pub fn switched(before: ControlLaw, after: ControlLaw, switch_time: f64) -> Result<Self> {
        let law = ControlLaw {
            set: after.set.clone(),
            state_dim: after.state_dim,
            kind: ControlKind::Switched {
                before: Box::new(before),
                after: Box::new(after),
                switch_time,
            },
        };
        law.validate()?;
        Ok(law)
    }

    /// Scalar-state, scalar-control affine law `u = -gain x`.
    pub fn linear_feedback(set: &ConvexSet, gain: f64) -> Self {
        Self::affine(set, 1, vec![gain], vec![0.0]).expect("scalar feedback law")
    }

    pub fn zero(set: &ConvexSet, state_dim: usize) -> Self {
        Self::constant(set, state_dim, vec![0.0; set.dim()]).expect("zero control")
    }

    pub fn control_dim(&self) -> usize {
        self.set.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l) = (self.state_dim, self.control_dim());
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &self.kind {
            ControlKind::Constant { value } => {
                if value.len() != l || !finite(value) {
                    return Err(invalid("control", format!("constant needs {l} finite values")));
                }
            }
            ControlKind::AffineFeedback { gain, offset } => {
                if gain.len() != l * n || offset.len() != l || !finite(gain) || !finite(offset) {
                    return Err(invalid(
                        "control",
                        format!("affine feedback needs a finite {l}x{n} gain and {l} offsets"),
                    ));
                }
            }
            ControlKind::TabulatedFeedback {
                lower,
                upper,
                bins,
                values,
            } => {
                if lower.len() != n || upper.len() != n || bins.len() != n {
                    return Err(invalid("control", format!("table grid needs {n} dimensions")));
                }
                if lower.iter().zip(upper).any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
                    || bins.iter().any(|b| *b == 0)
                {
                    return Err(invalid("control", "table needs lower < upper and bins >= 1"));
                }
                let cells: usize = bins.iter().product();
                if values.len() != cells * l || !finite(values) {
                    return Err(invalid(
                        "control",
                        format!("table needs {} finite values", cells * l),
                    ));
                }
            }
            ControlKind::Switched {
                before,
                after,
                switch_time,
            } => {
                before.validate()?;
                after.validate()?;
                if before.control_dim() != after.control_dim() || before.state_dim != after.state_dim
                {
                    return Err(invalid("control", "switched laws must have matching dimensions"));
                }
                if !switch_time.is_finite() {
                    return Err(invalid("control", "switch time must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Writes `u(t, x)` (projected into `U`) to `out`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ControlKind::Constant { value } => out.copy_from_slice(value),
            ControlKind::AffineFeedback { gain, offset } => {
                let n = self.state_dim;
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &gain[i * n..(i + 1) * n];
                    *o = offset[i] - row.iter().zip(x).map(|(k, xv)| k * xv).sum::<f64>();
                }
            }
            ControlKind::TabulatedFeedback { .. } => {
                let l = out.len();
                let cell = self.cell_index(x).expect("tabulated law");
                if let ControlKind::TabulatedFeedback { values, .. } = &self.kind {
                    out.copy_from_slice(&values[cell * l..(cell + 1) * l]);
                }
            }
            ControlKind::Switched {
                before,
                after,
                switch_time,
            } => {
                if t < *switch_time {
                    before.eval(t, x, out)
                } else {
                    after.eval(t, x, out)
                }
            }
        }
        self.set.project_in_place(out);
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.control_dim()];
        self.eval(t, x, &mut out);
        out
    }

    /// Cell of a tabulated law containing `x` (row-major over dimensions).
    pub fn cell_index(&self, x: &[f64]) -> Option<usize> {
        let ControlKind::TabulatedFeedback {
            lower, upper, bins, ..
        } = &self.kind
        else {
            return None;
        };
        let mut idx = 0;
        for j in 0..lower.len() {
            let frac = (x[j] - lower[j]) / (upper[j] - lower[j]);
            let b = (frac * bins[j] as f64).floor();
            let b = if b.is_nan() { 0 } else { b.clamp(0.0, (bins[j] - 1) as f64) as usize };
            idx = idx * bins[j] + b;
        }
        Some(idx)
    }

    /// Stable identifier derived from the parameters (FNV-1a of the JSON form).
    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("control law serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let name = match self.kind {
            ControlKind::Constant { .. } => "constant",
            ControlKind::AffineFeedback { .. } => "affine",
            ControlKind::TabulatedFeedback { .. } => "tabulated",
            ControlKind::Switched { .. } => "switched",
        };
        format!("{name}-{h:016x}")
    }

    /// The law with every output negated (before projection).
    pub fn negated(&self) -> Self {
        self.map_outputs(-1.0, &vec![0.0; self.control_dim()])
    }

    /// The law `u + delta` (before projection).
    pub fn shifted(&self, delta: &[f64]) -> Self {
        self.map_outputs(1.0, delta)
    }

    /// `scale · u + delta` applied to the unprojected outputs.
    fn map_outputs(&self, scale: f64, delta: &[f64]) -> Self {
        let l = self.control_dim();
        let affine = |v: &[f64]| -> Vec<f64> {
            v.iter().enumerate().map(|(i, x)| scale * x + delta[i % l]).collect()
        };
        let kind = match &self.kind {
            ControlKind::Constant { value } => ControlKind::Constant { value: affine(value) },
            ControlKind::AffineFeedback { gain, offset } => ControlKind::AffineFeedback {
                gain: gain.iter().map(|v| scale * v).collect(),
                offset: affine(offset),
            },
            ControlKind::TabulatedFeedback {
                lower,
                upper,
                bins,
                values,
            } => ControlKind::TabulatedFeedback {
                lower: lower.clone(),
                upper: upper.clone(),
                bins: bins.clone(),
                values: affine(values),
            },
            ControlKind::Switched {
                before,
                after,
                switch_time,
            } => ControlKind::Switched {
                before: Box::new(before.map_outputs(scale, delta)),
                after: Box::new(after.map_outputs(scale, delta)),
                switch_time: *switch_time,
            },
        };
        ControlLaw {
            kind,
            set: self.set.clone(),
            state_dim: self.state_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_law_is_projected() {
        let set = ConvexSet::interval(-5.0, 5.0);
        let law = ControlLaw::linear_feedback(&set, 2.0);
        assert_eq!(law.eval_vec(0.0, &[1.0]), vec![-2.0]);
        assert_eq!(law.eval_vec(0.0, &[-4.0]), vec![5.0]);
    }

    #[test]
    fn tabulated_law_clamps_to_edge_cells() {
        let set = ConvexSet::interval(-5.0, 5.0);
        let law = ControlLaw::tabulated(&set, vec![-1.0], vec![1.0], vec![4], vec![1.0, 2.0, 3.0, 9.0])
            .unwrap();
        assert_eq!(law.eval_vec(0.0, &[-7.0]), vec![1.0]);
        assert_eq!(law.eval_vec(0.0, &[0.1]), vec![3.0]);
        assert_eq!(law.eval_vec(0.0, &[3.0]), vec![5.0]);
    }

    #[test]
    fn switched_law_follows_time() {
        let set = ConvexSet::interval(-5.0, 5.0);
        let law = ControlLaw::switched(
            ControlLaw::constant(&set, 1, vec![1.0]).unwrap(),
            ControlLaw::zero(&set, 1),
            1.0,
        )
        .unwrap();
        assert_eq!(law.eval_vec(0.99, &[0.0]), vec![1.0]);
        assert_eq!(law.eval_vec(1.0, &[0.0]), vec![0.0]);
        assert_eq!(law.shifted(&[0.5]).eval_vec(0.0, &[0.0]), vec![1.5]);
        assert_eq!(law.negated().eval_vec(0.0, &[0.0]), vec![-1.0]);
    }

    #[test]
    fn ids_distinguish_parameters() {
        let set = ConvexSet::interval(-5.0, 5.0);
        let a = ControlLaw::linear_feedback(&set, 0.5);
        let b = ControlLaw::linear_feedback(&set, 0.25);
        assert_eq!(a.id(), a.clone().id());
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn malformed_laws_are_rejected() {
        let set = ConvexSet::interval(-5.0, 5.0);
        assert!(ControlLaw::constant(&set, 1, vec![0.0, 1.0]).is_err());
        assert!(ControlLaw::tabulated(&set, vec![1.0], vec![-1.0], vec![2], vec![0.0, 0.0]).is_err());
    }
}
