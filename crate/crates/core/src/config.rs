//! Problem config files.
//!
//! A config is a TOML document whose top-level keys describe the model (the
//! fields of [`ModelConfig`]) plus an optional `[run]` table of run
//! parameters. Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjoint::RegressionBasis;
use crate::cost::DEFAULT_WINDOW;
use crate::error::{invalid, Error, Result};
use crate::forward::TimeGrid;
use crate::model::{ControlLaw, ModelConfig, ModelSpec};
use crate::smp::{OptimizeSettings, SmpSettings};

/// Feedback law given in a config, completed with the model's control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `u = -gain x + offset`, gain `l×n` as a list of rows.
    Affine {
        gain: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
    Tabulated {
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: Vec<usize>,
        values: Vec<f64>,
    },
}

impl ControlSpec {
    pub fn build(&self, model: &ModelSpec) -> Result<ControlLaw> {
        let (n, l) = (model.state_dim(), model.control_dim());
        let set = model.control_set();
        match self {
            ControlSpec::Zero => Ok(ControlLaw::zero(set, n)),
            ControlSpec::Constant { value } => ControlLaw::constant(set, n, value.clone()),
            ControlSpec::Affine { gain, offset } => {
                if gain.len() != l || gain.iter().any(|r| r.len() != n) {
                    return Err(invalid("control.gain", format!("must be {l}x{n}")));
                }
                let offset = offset.clone().unwrap_or_else(|| vec![0.0; l]);
                ControlLaw::affine(set, n, gain.concat(), offset)
            }
            ControlSpec::Tabulated {
                lower,
                upper,
                bins,
                values,
            } => ControlLaw::tabulated(set, lower.clone(), upper.clone(), bins.clone(), values.clone()),
        }
    }
}

/// Run parameters; every field has a default except the seed, which must be
/// supplied here or on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: usize,
    pub dt: f64,
    /// Horizon `T`.
    pub horizon: f64,
    /// Discarded tail of the adjoint solves after `T`.
    pub buffer: f64,
    pub window: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub degree: u32,
    pub ridge: f64,
    /// Perturbation sizes, strictly decreasing in `(0, 1]`.
    pub thetas: Vec<f64>,
    /// Optimizer step `γ`.
    pub step: f64,
    pub iterations: usize,
    pub patience: usize,
    /// Random linear gains in the candidate battery.
    pub battery_gains: usize,
    /// Hessian probes of the sufficiency check.
    pub probes: usize,
    /// `duality-check` passes when `rel_residual` is below this.
    pub duality_threshold: f64,
    /// Reference control `ū` (initial law for `optimize`).
    pub control: ControlSpec,
    /// Alternative control for perturbation runs; all ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternative: Option<ControlSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            paths: 4096,
            dt: 0.01,
            horizon: 20.0,
            buffer: 4.0,
            window: DEFAULT_WINDOW,
            x0: None,
            degree: 3,
            ridge: 1e-8,
            thetas: vec![0.2, 0.1, 0.05],
            step: 0.5,
            iterations: 30,
            patience: 5,
            battery_gains: 4,
            probes: 200,
            duality_threshold: 0.05,
            control: ControlSpec::Zero,
            alternative: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, "must be positive and finite"))
            }
        };
        if self.seed.is_some_and(|s| s > i64::MAX as u64) {
            return Err(invalid("seed", "must fit a TOML integer (at most 2^63 - 1)"));
        }
        positive("dt", self.dt)?;
        positive("horizon", self.horizon)?;
        positive("step", self.step)?;
        positive("duality_threshold", self.duality_threshold)?;
        if !(self.buffer >= 0.0 && self.buffer.is_finite()) {
            return Err(invalid("buffer", "must be non-negative and finite"));
        }
        if !(self.window > 0.0 && self.window <= 1.0) {
            return Err(invalid("window", "must lie in (0, 1]"));
        }
        if self.paths < 2 {
            return Err(invalid("paths", "need at least 2 paths"));
        }
        if self.patience == 0 {
            return Err(invalid("patience", "must be at least 1"));
        }
        if self.probes == 0 {
            return Err(invalid("probes", "must be at least 1"));
        }
        TimeGrid::with_horizon(self.dt, self.horizon)?;
        self.basis()?;
        if let Some(x0) = &self.x0 {
            if x0.len() != model.state_dim() || x0.iter().any(|v| !v.is_finite()) {
                return Err(invalid("x0", format!("needs {} finite values", model.state_dim())));
            }
        }
        if self.thetas.is_empty()
            || self.thetas.windows(2).any(|w| w[1] >= w[0])
            || self.thetas.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(invalid("thetas", "must be non-empty, strictly decreasing, in (0, 1]"));
        }
        self.control.build(model)?;
        self.alternative(model)?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| invalid("seed", "no seed given; set run.seed or pass --seed"))
    }

    pub fn x0(&self, model: &ModelSpec) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| vec![0.0; model.state_dim()])
    }

    pub fn alternative(&self, model: &ModelSpec) -> Result<ControlLaw> {
        match &self.alternative {
            Some(c) => c.build(model),
            None => ControlLaw::constant(model.control_set(), model.state_dim(), vec![1.0; model.control_dim()]),
        }
    }

    pub fn basis(&self) -> Result<RegressionBasis> {
        RegressionBasis::new(self.degree, self.ridge)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_horizon(self.dt, self.horizon)
    }

    pub fn smp_settings(&self, model: &ModelSpec) -> Result<SmpSettings> {
        Ok(SmpSettings {
            x0: self.x0(model),
            horizon: self.horizon,
            buffer: self.buffer,
            dt: self.dt,
            paths: self.paths,
            seed: self.seed()?,
            window: self.window,
            basis: self.basis()?,
        })
    }

    pub fn optimize_settings(&self, model: &ModelSpec) -> Result<OptimizeSettings> {
        Ok(OptimizeSettings {
            smp: self.smp_settings(model)?,
            step: self.step,
            iterations: self.iterations,
            patience: self.patience,
            grad_tolerance: 1e-6,
        })
    }
}

/// Parses a config from text.
pub fn parse_config(text: &str) -> Result<(ModelSpec, RunConfig)> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let run = match table.remove("run") {
        None => RunConfig::default(),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(locate(text, "run", &e.to_string())))?,
    };
    let model_config: ModelConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(locate(text, "model", &e.to_string())))?;
    let model = ModelSpec::new(model_config).map_err(|e| Error::Config(format!("model: {e}")))?;
    run.validate(&model).map_err(|e| Error::Config(format!("run: {e}")))?;
    Ok((model, run))
}

/// Adds the line of the offending key when the message names one.
fn locate(text: &str, section: &str, message: &str) -> String {
    let key = message
        .split('`')
        .nth(1)
        .filter(|k| !k.is_empty() && !k.contains(' '));
    let line = key.and_then(|k| {
        text.lines()
            .position(|l| l.trim_start().starts_with(k) && l[l.find(k).unwrap() + k.len()..].trim_start().starts_with('='))
    });
    match line {
        Some(i) => format!("{section}: line {}: {}", i + 1, message.trim()),
        None => format!("{section}: {}", message.trim()),
    }
}

pub fn load_config(path: &Path) -> Result<(ModelSpec, RunConfig)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Serialize)]
struct ConfigFile<'a> {
    #[serde(flatten)]
    model: &'a ModelConfig,
    run: &'a RunConfig,
}

/// Serializes the normalized form; parsing the output gives back equal values.
pub fn to_toml(model: &ModelSpec, run: &RunConfig) -> Result<String> {
    let normalized = model.config().normalized();
    toml::to_string(&ConfigFile {
        model: &normalized,
        run,
    })
    .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LQ1: &str = r#"
family = "lq"
n = 1
d = 1
l = 1
a = [[-1.0]]
b = [[1.0]]
sigma = [[1.0]]
q = [[1.0]]
r = [[1.0]]

[control_set]
kind = "box"
lower = [-5.0]
upper = [5.0]

[run]
seed = 7
"#;

    #[test]
    fn minimal_lq_file() {
        let (m, run) = parse_config(LQ1).unwrap();
        assert_eq!((m.state_dim(), m.noise_dim(), m.control_dim()), (1, 1, 1));
        assert_eq!(m.config().normalized(), ModelConfig::lq1().normalized());
        assert_eq!(run.seed().unwrap(), 7);
        assert_eq!(run.paths, 4096);
    }

    #[test]
    fn round_trip_is_stable() {
        let text = LQ1.replace("a = [[-1.0]]", "a = [[-1.0000000000000002]]")
            + "paths = 123\ndt = 0.1\nthetas = [0.3, 0.1]\ncontrol = { kind = \"affine\", gain = [[0.41421356237309515]] }\n";
        let (m, run) = parse_config(&text).unwrap();
        let out = to_toml(&m, &run).unwrap();
        let (m2, run2) = parse_config(&out).unwrap();
        assert_eq!(m2.config(), &m.config().normalized());
        assert_eq!(run2, run);
        assert_eq!(to_toml(&m2, &run2).unwrap(), out);
        assert_eq!(m2.config().a[0][0].to_bits(), (-1.0000000000000002f64).to_bits());
    }

    #[test]
    fn constant_violation_rejected() {
        let text = LQ1.replace("r = [[1.0]]", "r = [[1.0]]\nm = 0\np = 4.0");
        let e = parse_config(&text).unwrap_err().to_string();
        assert!(e.contains("model"), "{e}");
    }

    #[test]
    fn reversed_box_rejected() {
        let text = LQ1.replace("lower = [-5.0]", "lower = [6.0]");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn unknown_keys_are_fatal_with_location() {
        let e = parse_config(&LQ1.replace("sigma = ", "sigmaa = ")).unwrap_err().to_string();
        assert!(e.contains("sigmaa") && e.contains("line 8"), "{e}");
        let e = parse_config(&(LQ1.to_string() + "pathz = 3\n")).unwrap_err().to_string();
        assert!(e.contains("pathz") && e.contains("run"), "{e}");
        assert!(parse_config("family = [").is_err());
    }

    #[test]
    fn missing_seed_is_reported() {
        let (_, run) = parse_config(&LQ1.replace("seed = 7", "")).unwrap();
        assert!(run.seed().is_err());
    }

    #[test]
    fn bad_run_values_rejected() {
        for extra in ["dt = -1.0", "thetas = [0.1, 0.2]", "window = 0.0", "x0 = [1.0, 2.0]", "degree = 0"] {
            assert!(parse_config(&(LQ1.to_string() + extra + "\n")).is_err(), "{extra}");
        }
    }
}
