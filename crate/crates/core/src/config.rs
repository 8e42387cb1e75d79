//! TOML run configuration.
//!
//! ```toml
//! output = "out"
//!
//! [model]
//! kind = "logistic"
//! discount = 0.05
//! price = 0.5              # scalar, list, or {base, slope} tables
//! seed_cost = 2.5
//! [model.coefficients]
//! b1 = 3.0
//! b2 = 2.0
//! sigma = 2.0
//!
//! [bounds]
//! seed = 0.5               # number, "inf", or a per-species list
//! harvest = "inf"
//!
//! [grid]
//! upper = 4.0
//! h = 0.01
//! ```
//!
//! Optional sections: `[solver]`, `[sweep]`, `[simulate]`. Unknown keys are
//! rejected everywhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{SweepParameter, SweepSpec};
use crate::chain::{ChainError, Grid};
use crate::model::{build_model, Affine, BuiltinModel, Dynamics, ModelError, ModelSpec, Rate, RateBounds};
use crate::simulate::SimConfig;
use crate::solver::{SolveParams, SweepOrder, UpdateScheme};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateValue {
    Number(f64),
    Text(String),
}

impl RateValue {
    fn to_rate(&self, key: &str) -> Result<Rate, ConfigError> {
        match self {
            RateValue::Number(v) if v.is_finite() && *v >= 0.0 => Ok(Rate::Finite(*v)),
            RateValue::Number(v) => Err(invalid(key, format!("rate must be finite and nonnegative, got {v} (use \"inf\" for unbounded)"))),
            RateValue::Text(s) if s == "inf" => Ok(Rate::Unbounded),
            RateValue::Text(s) => Err(invalid(key, format!("expected a number or \"inf\", got \"{s}\""))),
        }
    }

    fn from_rate(r: Rate) -> Self {
        match r {
            Rate::Finite(v) => RateValue::Number(v),
            Rate::Unbounded => RateValue::Text("inf".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateSpec {
    PerSpecies(Vec<RateValue>),
    One(RateValue),
}

impl RateSpec {
    fn to_rates(&self, key: &str, d: usize) -> Result<Vec<Rate>, ConfigError> {
        match self {
            RateSpec::One(v) => Ok(vec![v.to_rate(key)?; d]),
            RateSpec::PerSpecies(vs) => {
                if vs.len() != d {
                    return Err(invalid(key, format!("expected {d} entries, found {}", vs.len())));
                }
                vs.iter().map(|v| v.to_rate(key)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub base: f64,
    #[serde(default)]
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceEntry {
    Constant(f64),
    Affine(AffineSpec),
}

impl PriceEntry {
    fn to_affine(&self) -> Affine {
        match self {
            PriceEntry::Constant(v) => Affine::constant(*v),
            PriceEntry::Affine(a) => Affine {
                base: a.base,
                slope: a.slope,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceSpec {
    PerSpecies(Vec<PriceEntry>),
    One(PriceEntry),
}

impl PriceSpec {
    fn to_affines(&self, key: &str, d: usize) -> Result<Vec<Affine>, ConfigError> {
        match self {
            PriceSpec::One(e) => Ok(vec![e.to_affine(); d]),
            PriceSpec::PerSpecies(es) => {
                if es.len() != d {
                    return Err(invalid(key, format!("expected {d} entries, found {}", es.len())));
                }
                Ok(es.iter().map(PriceEntry::to_affine).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub discount: f64,
    pub price: PriceSpec,
    pub seed_cost: PriceSpec,
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub seed: RateSpec,
    pub harvest: RateSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub upper: f64,
    pub h: f64,
}

fn default_tolerance() -> f64 {
    SolveParams::default().tolerance
}
fn default_max_iterations() -> usize {
    SolveParams::default().max_iterations
}
fn default_sweep_order() -> String {
    SolveParams::default().sweep_order.as_str().into()
}
fn default_update_scheme() -> String {
    SolveParams::default().update_scheme.as_str().into()
}
fn default_control_levels() -> usize {
    SolveParams::default().control_levels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_sweep_order")]
    pub sweep_order: String,
    #[serde(default = "default_update_scheme")]
    pub update_scheme: String,
    #[serde(default = "default_control_levels")]
    pub control_levels: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tolerance: default_tolerance(),
            max_iterations: default_max_iterations(),
            sweep_order: default_sweep_order(),
            update_scheme: default_update_scheme(),
            control_levels: default_control_levels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// `mu`, `lambda`, or a model coefficient name such as `sigma`.
    pub parameter: String,
    pub values: Vec<RateValue>,
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub samples: Vec<Vec<f64>>,
    /// Relative slack of the verification test.
    pub slack: Option<f64>,
}

/// Results appended to a run manifest; ignored when a manifest is re-read
/// as a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub final_change: Option<f64>,
    pub bellman_residual: Option<f64>,
    pub wall_time_seconds: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: ModelSection,
    pub bounds: BoundsSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub sweep: Option<SweepSection>,
    pub simulate: Option<SimulateSection>,
    pub run: Option<RunRecord>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

pub const DEFAULT_SLACK: f64 = 0.05;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Checks every section so that errors surface before any computation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = self.model()?;
        let bounds = self.bounds()?;
        Grid::build(self.grid.upper, self.grid.h, bounds.regime()?, model.dim())?;
        self.solve_params()?.validate().map_err(|e| invalid("solver", e.to_string()))?;
        if self.sweep.is_some() {
            self.sweep_spec()?;
        }
        if let Some(s) = &self.simulate {
            if let Some(slack) = s.slack {
                if !(slack >= 0.0) {
                    return Err(invalid("simulate.slack", "must be nonnegative"));
                }
            }
            for x in &s.samples {
                if x.len() != model.dim() {
                    return Err(invalid("simulate.samples", format!("{x:?} has the wrong dimension")));
                }
            }
        }
        Ok(())
    }

    pub fn builtin(&self) -> Result<BuiltinModel, ConfigError> {
        Ok(BuiltinModel::from_coefficients(&self.model.kind, &self.model.coefficients)?)
    }

    pub fn dim(&self) -> Result<usize, ConfigError> {
        Ok(self.builtin()?.dim())
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        let builtin = self.builtin()?;
        let d = self.dim()?;
        Ok(build_model(
            builtin,
            self.model.price.to_affines("model.price", d)?,
            self.model.seed_cost.to_affines("model.seed_cost", d)?,
            self.model.discount,
        )?)
    }

    pub fn bounds(&self) -> Result<RateBounds, ConfigError> {
        let d = self.dim()?;
        Ok(RateBounds::new(
            self.bounds.seed.to_rates("bounds.seed", d)?,
            self.bounds.harvest.to_rates("bounds.harvest", d)?,
        )?)
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Ok(Grid::build(
            self.grid.upper,
            self.grid.h,
            self.bounds()?.regime()?,
            self.dim()?,
        )?)
    }

    pub fn solve_params(&self) -> Result<SolveParams, ConfigError> {
        let s = &self.solver;
        let sweep_order = match s.sweep_order.as_str() {
            "alternating" => SweepOrder::Alternating,
            "ascending" => SweepOrder::Ascending,
            "descending" => SweepOrder::Descending,
            other => {
                return Err(invalid(
                    "solver.sweep_order",
                    format!("`{other}` (expected alternating, ascending or descending)"),
                ))
            }
        };
        let update_scheme = match s.update_scheme.as_str() {
            "gauss_seidel" => UpdateScheme::GaussSeidel,
            "jacobi" => UpdateScheme::Jacobi,
            "policy_iteration" => UpdateScheme::PolicyIteration,
            other => {
                return Err(invalid(
                    "solver.update_scheme",
                    format!("`{other}` (expected gauss_seidel, jacobi or policy_iteration)"),
                ))
            }
        };
        Ok(SolveParams {
            tolerance: s.tolerance,
            max_iterations: s.max_iterations,
            sweep_order,
            update_scheme,
            control_levels: s.control_levels,
        })
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, ConfigError> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| invalid("sweep", "section missing"))?;
        let parameter = SweepParameter::parse(&s.parameter);
        let values = s
            .values
            .iter()
            .map(|v| match v.to_rate("sweep.values")? {
                Rate::Finite(x) => Ok(x),
                Rate::Unbounded => Ok(f64::INFINITY),
            })
            .collect::<Result<Vec<f64>, ConfigError>>()?;
        if values.is_empty() || values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("sweep.values", "must be non-empty and strictly increasing"));
        }
        if let SweepParameter::Coefficient(name) = &parameter {
            self.builtin()?.with_coefficient(name, values[0])?;
        }
        let d = self.dim()?;
        if let Some(p) = s.probes.iter().find(|p| p.len() != d) {
            return Err(invalid("sweep.probes", format!("{p:?} has the wrong dimension")));
        }
        Ok(SweepSpec {
            parameter,
            values,
            probes: s.probes.clone(),
        })
    }

    /// Simulation settings with defaults filled in from the lattice.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let grid = self.grid()?;
        let model = self.model()?;
        let mut cfg = SimConfig::defaults_for(&grid, &model);
        if let Some(s) = &self.simulate {
            if let Some(v) = s.dt {
                cfg.dt = v;
            }
            if let Some(v) = s.horizon {
                cfg.horizon = v;
            }
            if let Some(v) = s.paths {
                cfg.paths = v;
            }
            if let Some(v) = s.seed {
                cfg.seed = v;
            }
        }
        cfg.validate().map_err(|e| invalid("simulate", e.to_string()))?;
        Ok(cfg)
    }

    pub fn samples(&self) -> Vec<Vec<f64>> {
        self.simulate
            .as_ref()
            .map(|s| s.samples.clone())
            .unwrap_or_default()
    }

    pub fn slack(&self) -> f64 {
        self.simulate
            .as_ref()
            .and_then(|s| s.slack)
            .unwrap_or(DEFAULT_SLACK)
    }

    /// A copy with every default written out, suitable as a manifest that
    /// reproduces the run.
    pub fn materialized(&self) -> Result<RunConfig, ConfigError> {
        let d = self.dim()?;
        let bounds = self.bounds()?;
        let mut out = self.clone();
        out.bounds = BoundsSection {
            seed: RateSpec::PerSpecies(bounds.seed.iter().map(|r| RateValue::from_rate(*r)).collect()),
            harvest: RateSpec::PerSpecies(bounds.harvest.iter().map(|r| RateValue::from_rate(*r)).collect()),
        };
        let model = self.model()?;
        let affine = |a: &Affine| PriceEntry::Affine(AffineSpec {
            base: a.base,
            slope: a.slope,
        });
        out.model.price = PriceSpec::PerSpecies(model.prices().iter().map(affine).collect());
        out.model.seed_cost = PriceSpec::PerSpecies(model.seed_costs().iter().map(affine).collect());
        let sim = self.sim_config()?;
        let prev = self.simulate.clone();
        out.simulate = Some(SimulateSection {
            dt: Some(sim.dt),
            horizon: Some(sim.horizon),
            paths: Some(sim.paths),
            seed: Some(sim.seed),
            samples: prev.as_ref().map(|s| s.samples.clone()).unwrap_or_default(),
            slack: Some(self.slack()),
        });
        debug_assert_eq!(out.dim()?, d);
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| invalid("manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Regime;

    const LOGISTIC: &str = r#"
[model]
kind = "logistic"
discount = 0.05
price = 0.5
seed_cost = 2.5
[model.coefficients]
b1 = 3.0
b2 = 2.0
sigma = 2.0

[bounds]
seed = 0.5
harvest = "inf"

[grid]
upper = 4.0
h = 0.01
"#;

    #[test]
    fn parses_logistic() {
        let c = RunConfig::parse(LOGISTIC).unwrap();
        assert_eq!(c.bounds().unwrap().regime().unwrap(), Regime::BoundedSeeding);
        assert_eq!(c.grid().unwrap().node_count(), 401);
        assert_eq!(c.solve_params().unwrap(), SolveParams::default());
        assert_eq!(c.output, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = LOGISTIC.replace("h = 0.01", "h = 0.01\nspacing = 2");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("spacing"), "{err}");
        let text = LOGISTIC.replace("sigma = 2.0", "sigma = 2.0\nsgima = 1");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn only_inf_is_unbounded() {
        let text = LOGISTIC.replace("harvest = \"inf\"", "harvest = \"infinity\"");
        assert!(RunConfig::parse(&text).is_err());
        let text = LOGISTIC.replace("harvest = \"inf\"", "harvest = 1e308");
        assert_eq!(
            RunConfig::parse(&text).unwrap().bounds().unwrap().regime().unwrap(),
            Regime::BoundedBoth
        );
    }

    #[test]
    fn mixed_finiteness_rejected() {
        let text = r#"
[model]
kind = "competition"
discount = 0.05
price = [1.0, 1.5]
seed_cost = [4.0, 3.0]
[model.coefficients]
b1 = 3.0
b2 = 2.0
a11 = 2.0
a12 = 1.5
a21 = 2.0
a22 = 2.0
sigma1 = 3.0
sigma2 = 4.0

[bounds]
seed = ["inf", 0.5]
harvest = 3.0

[grid]
upper = 4.0
h = 0.05
"#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(matches!(err, ConfigError::Model(ModelError::MixedFiniteness { .. })), "{err}");
    }

    #[test]
    fn manifest_round_trips() {
        let c = RunConfig::parse(LOGISTIC).unwrap();
        let mut m = c.materialized().unwrap();
        m.run = Some(RunRecord {
            command: "solve".into(),
            iterations: Some(3),
            converged: Some(true),
            final_change: Some(1e-8),
            bellman_residual: Some(1e-8),
            wall_time_seconds: 0.5,
            version: "0.1.0".into(),
        });
        let text = m.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.model().unwrap().discount(), 0.05);
        assert_eq!(back.sim_config().unwrap(), c.sim_config().unwrap());
    }
}
