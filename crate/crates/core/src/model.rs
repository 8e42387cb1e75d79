//! Population dynamics, economic data and rate bounds.
//!
//! A [`ModelSpec`] bundles the controlled diffusion's coefficients (drift
//! `b(x)` and covariance `a(x) = σ(x)σ(x)'`) with the harvest prices `f`,
//! seeding costs `g` and the discount rate `δ`. The standing assumptions the
//! solver relies on are exposed as report-valued checks so they can be run
//! from the CLI before any compute.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("discount rate must be positive, got {0}")]
    NonPositiveDiscount(f64),
    #[error("invalid coefficient `{field}` = {value}: {reason}")]
    InvalidCoefficient {
        field: String,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown coefficient `{field}` for model `{model}`")]
    UnknownCoefficient { model: &'static str, field: String },
    #[error("missing coefficient `{field}` for model `{model}`")]
    MissingCoefficient { model: &'static str, field: &'static str },
    #[error("unknown model kind `{0}` (expected logistic, competition or predator_prey)")]
    UnknownModel(String),
    #[error("{what} has {got} entries but the model has {expected} species")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("the growth-condition check requires constant prices")]
    NonConstantPrice,
    #[error("{which} rates mix finite and unbounded entries across species")]
    MixedFiniteness { which: &'static str },
    #[error("{which} rate for species {species} must be a nonnegative finite number or unbounded, got {value}")]
    InvalidRate {
        which: &'static str,
        species: usize,
        value: f64,
    },
}

/// Drift and covariance of an uncontrolled population diffusion.
///
/// `diff_cov` writes the `d×d` matrix row-major into `out`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn diff_cov(&self, x: &[f64], out: &mut [f64]);
    fn name(&self) -> &str {
        "custom"
    }
}

/// The three population models used throughout the numerical experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinModel {
    /// `dX = X(b1 - b2 X) dt + σ X dw`
    Logistic { b1: f64, b2: f64, sigma: f64 },
    /// Two-species Lotka–Volterra competition with independent noise.
    Competition {
        b1: f64,
        b2: f64,
        a11: f64,
        a12: f64,
        a21: f64,
        a22: f64,
        sigma1: f64,
        sigma2: f64,
    },
    /// Logistic prey, predator with a Holling type-2 functional response.
    PredatorPrey {
        b1: f64,
        b2: f64,
        b3: f64,
        a11: f64,
        a12: f64,
        a21: f64,
        a22: f64,
        sigma1: f64,
        sigma2: f64,
    },
}

const LOGISTIC_KEYS: &[&str] = &["b1", "b2", "sigma"];
const COMPETITION_KEYS: &[&str] = &["b1", "b2", "a11", "a12", "a21", "a22", "sigma1", "sigma2"];
const PREDATOR_PREY_KEYS: &[&str] = &[
    "b1", "b2", "b3", "a11", "a12", "a21", "a22", "sigma1", "sigma2",
];

impl BuiltinModel {
    pub fn kind(&self) -> &'static str {
        match self {
            BuiltinModel::Logistic { .. } => "logistic",
            BuiltinModel::Competition { .. } => "competition",
            BuiltinModel::PredatorPrey { .. } => "predator_prey",
        }
    }

    fn keys_for(kind: &str) -> Option<(&'static str, &'static [&'static str])> {
        match kind {
            "logistic" => Some(("logistic", LOGISTIC_KEYS)),
            "competition" => Some(("competition", COMPETITION_KEYS)),
            "predator_prey" => Some(("predator_prey", PREDATOR_PREY_KEYS)),
            _ => None,
        }
    }

    /// Builds a model from a kind name and a coefficient map, rejecting
    /// unknown or missing names and invalid values.
    pub fn from_coefficients(
        kind: &str,
        coefficients: &BTreeMap<String, f64>,
    ) -> Result<Self, ModelError> {
        let (kind, keys) =
            Self::keys_for(kind).ok_or_else(|| ModelError::UnknownModel(kind.to_string()))?;
        if let Some(unknown) = coefficients.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(ModelError::UnknownCoefficient {
                model: kind,
                field: unknown.clone(),
            });
        }
        let get = |field: &'static str| {
            coefficients
                .get(field)
                .copied()
                .ok_or(ModelError::MissingCoefficient { model: kind, field })
        };
        let model = match kind {
            "logistic" => BuiltinModel::Logistic {
                b1: get("b1")?,
                b2: get("b2")?,
                sigma: get("sigma")?,
            },
            "competition" => BuiltinModel::Competition {
                b1: get("b1")?,
                b2: get("b2")?,
                a11: get("a11")?,
                a12: get("a12")?,
                a21: get("a21")?,
                a22: get("a22")?,
                sigma1: get("sigma1")?,
                sigma2: get("sigma2")?,
            },
            _ => BuiltinModel::PredatorPrey {
                b1: get("b1")?,
                b2: get("b2")?,
                b3: get("b3")?,
                a11: get("a11")?,
                a12: get("a12")?,
                a21: get("a21")?,
                a22: get("a22")?,
                sigma1: get("sigma1")?,
                sigma2: get("sigma2")?,
            },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn coefficients(&self) -> Vec<(&'static str, f64)> {
        match *self {
            BuiltinModel::Logistic { b1, b2, sigma } => {
                vec![("b1", b1), ("b2", b2), ("sigma", sigma)]
            }
            BuiltinModel::Competition {
                b1,
                b2,
                a11,
                a12,
                a21,
                a22,
                sigma1,
                sigma2,
            } => vec![
                ("b1", b1),
                ("b2", b2),
                ("a11", a11),
                ("a12", a12),
                ("a21", a21),
                ("a22", a22),
                ("sigma1", sigma1),
                ("sigma2", sigma2),
            ],
            BuiltinModel::PredatorPrey {
                b1,
                b2,
                b3,
                a11,
                a12,
                a21,
                a22,
                sigma1,
                sigma2,
            } => vec![
                ("b1", b1),
                ("b2", b2),
                ("b3", b3),
                ("a11", a11),
                ("a12", a12),
                ("a21", a21),
                ("a22", a22),
                ("sigma1", sigma1),
                ("sigma2", sigma2),
            ],
        }
    }

    /// Returns a copy with one coefficient replaced (used by parameter sweeps).
    pub fn with_coefficient(&self, field: &str, value: f64) -> Result<Self, ModelError> {
        let mut map: BTreeMap<String, f64> = self
            .coefficients()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        if !map.contains_key(field) {
            return Err(ModelError::UnknownCoefficient {
                model: self.kind(),
                field: field.to_string(),
            });
        }
        map.insert(field.to_string(), value);
        Self::from_coefficients(self.kind(), &map)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in self.coefficients() {
            if !value.is_finite() {
                return Err(invalid(field, value, "must be finite"));
            }
            let reason = match field {
                "sigma" | "sigma1" | "sigma2" if value <= 0.0 => Some("must be strictly positive"),
                "b3" if value <= 0.0 => Some("half-saturation constant must be strictly positive"),
                "a11" | "a12" | "a21" | "a22" if value < 0.0 => {
                    Some("interaction coefficients must be nonnegative")
                }
                "b2" if value < 0.0 => Some("must be nonnegative"),
                _ => None,
            };
            if let Some(reason) = reason {
                return Err(invalid(field, value, reason));
            }
        }
        Ok(())
    }
}

fn invalid(field: &str, value: f64, reason: &'static str) -> ModelError {
    ModelError::InvalidCoefficient {
        field: field.to_string(),
        value,
        reason,
    }
}

impl Dynamics for BuiltinModel {
    fn dim(&self) -> usize {
        match self {
            BuiltinModel::Logistic { .. } => 1,
            _ => 2,
        }
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            BuiltinModel::Logistic { b1, b2, .. } => {
                out[0] = x[0] * (b1 - b2 * x[0]);
            }
            BuiltinModel::Competition {
                b1,
                b2,
                a11,
                a12,
                a21,
                a22,
                ..
            } => {
                out[0] = x[0] * (b1 - a11 * x[0] - a12 * x[1]);
                out[1] = x[1] * (b2 - a21 * x[0] - a22 * x[1]);
            }
            BuiltinModel::PredatorPrey {
                b1,
                b2,
                b3,
                a11,
                a12,
                a21,
                a22,
                ..
            } => {
                let response = 1.0 / (b3 + x[0]);
                out[0] = x[0] * (b1 - a11 * x[0] - a12 * x[1] * response);
                out[1] = x[1] * (-b2 + a21 * x[0] * response - a22 * x[1]);
            }
        }
    }

    #[inline]
    fn diff_cov(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            BuiltinModel::Logistic { sigma, .. } => {
                out[0] = sigma * sigma * x[0] * x[0];
            }
            BuiltinModel::Competition { sigma1, sigma2, .. }
            | BuiltinModel::PredatorPrey { sigma1, sigma2, .. } => {
                out[0] = sigma1 * sigma1 * x[0] * x[0];
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = sigma2 * sigma2 * x[1] * x[1];
            }
        }
    }

    fn name(&self) -> &str {
        self.kind()
    }
}

/// Per-species price or cost `base + slope * x_i`; constant when `slope == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub base: f64,
    pub slope: f64,
}

impl Affine {
    pub fn constant(value: f64) -> Self {
        Affine {
            base: value,
            slope: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, xi: f64) -> f64 {
        self.base + self.slope * xi
    }

    pub fn is_constant(&self) -> bool {
        self.slope == 0.0
    }
}

#[derive(Debug, Clone)]
pub enum DynamicsSource {
    Builtin(BuiltinModel),
    Custom(Arc<dyn Dynamics>),
}

/// Immutable model description; cheap to clone and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    dynamics: DynamicsSource,
    price: Vec<Affine>,
    seed_cost: Vec<Affine>,
    discount: f64,
}

/// Validates the inputs and assembles a [`ModelSpec`].
pub fn build_model(
    builtin: BuiltinModel,
    price: Vec<Affine>,
    seed_cost: Vec<Affine>,
    discount: f64,
) -> Result<ModelSpec, ModelError> {
    builtin.validate()?;
    ModelSpec::new(DynamicsSource::Builtin(builtin), price, seed_cost, discount)
}

impl ModelSpec {
    pub fn new(
        dynamics: DynamicsSource,
        price: Vec<Affine>,
        seed_cost: Vec<Affine>,
        discount: f64,
    ) -> Result<Self, ModelError> {
        if !(discount > 0.0) || !discount.is_finite() {
            return Err(ModelError::NonPositiveDiscount(discount));
        }
        let d = match &dynamics {
            DynamicsSource::Builtin(m) => m.dim(),
            DynamicsSource::Custom(m) => m.dim(),
        };
        for (what, v) in [("price", &price), ("seed_cost", &seed_cost)] {
            if v.len() != d {
                return Err(ModelError::DimensionMismatch {
                    what,
                    expected: d,
                    got: v.len(),
                });
            }
            for a in v.iter() {
                if !a.base.is_finite() || !a.slope.is_finite() {
                    return Err(invalid(what, a.base, "must be finite"));
                }
                if a.slope > 0.0 {
                    return Err(invalid(what, a.slope, "slope must be non-positive"));
                }
            }
        }
        Ok(ModelSpec {
            dynamics,
            price,
            seed_cost,
            discount,
        })
    }

    /// Model with user-supplied dynamics (library use only).
    pub fn custom(
        dynamics: Arc<dyn Dynamics>,
        price: Vec<Affine>,
        seed_cost: Vec<Affine>,
        discount: f64,
    ) -> Result<Self, ModelError> {
        Self::new(DynamicsSource::Custom(dynamics), price, seed_cost, discount)
    }

    pub fn dim(&self) -> usize {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => m.dim(),
            DynamicsSource::Custom(m) => m.dim(),
        }
    }

    pub fn name(&self) -> &str {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => m.kind(),
            DynamicsSource::Custom(m) => m.name(),
        }
    }

    pub fn builtin(&self) -> Option<&BuiltinModel> {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => Some(m),
            DynamicsSource::Custom(_) => None,
        }
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => m.drift(x, out),
            DynamicsSource::Custom(m) => m.drift(x, out),
        }
    }

    #[inline]
    pub fn diff_cov(&self, x: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => m.diff_cov(x, out),
            DynamicsSource::Custom(m) => m.diff_cov(x, out),
        }
    }

    /// Marginal harvest yield of species `i` at `x`.
    #[inline]
    pub fn price(&self, i: usize, x: &[f64]) -> f64 {
        self.price[i].eval(x[i])
    }

    /// Marginal seeding cost of species `i` at `x`.
    #[inline]
    pub fn seed_cost(&self, i: usize, x: &[f64]) -> f64 {
        self.seed_cost[i].eval(x[i])
    }

    pub fn prices(&self) -> &[Affine] {
        &self.price
    }

    pub fn seed_costs(&self) -> &[Affine] {
        &self.seed_cost
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn price_is_constant(&self) -> bool {
        self.price.iter().all(Affine::is_constant)
    }

    pub fn cost_is_constant(&self) -> bool {
        self.seed_cost.iter().all(Affine::is_constant)
    }

    /// Replaces one built-in coefficient; errors for custom dynamics.
    pub fn with_coefficient(&self, field: &str, value: f64) -> Result<Self, ModelError> {
        match &self.dynamics {
            DynamicsSource::Builtin(m) => {
                let m = m.with_coefficient(field, value)?;
                Self::new(
                    DynamicsSource::Builtin(m),
                    self.price.clone(),
                    self.seed_cost.clone(),
                    self.discount,
                )
            }
            DynamicsSource::Custom(m) => Err(ModelError::UnknownCoefficient {
                model: "custom",
                field: format!("{field} (dynamics `{}` has no named coefficients)", m.name()),
            }),
        }
    }
}

/// Maximum harvesting or seeding rate of one species.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Finite(f64),
    Unbounded,
}

impl Rate {
    pub fn is_finite(&self) -> bool {
        matches!(self, Rate::Finite(_))
    }

    /// The finite bound, or `None` when unbounded.
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Finite(v) => Some(*v),
            Rate::Unbounded => None,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Finite(v) => write!(f, "{v}"),
            Rate::Unbounded => f.write_str("inf"),
        }
    }
}

/// Which of the four seeding/harvesting control structures applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Bounded seeding rate, unbounded (singular) harvesting.
    BoundedSeeding,
    /// Both rates bounded; the state is reflected at the enlarged boundary.
    BoundedBoth,
    /// Unbounded (singular) seeding, bounded harvesting rate.
    BoundedHarvesting,
    /// Both controls singular.
    Singular,
}

impl Regime {
    /// Short letter code used in file headers.
    pub fn letter(&self) -> char {
        match self {
            Regime::BoundedSeeding => 'A',
            Regime::BoundedBoth => 'B',
            Regime::BoundedHarvesting => 'C',
            Regime::Singular => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'A' => Some(Regime::BoundedSeeding),
            'B' => Some(Regime::BoundedBoth),
            'C' => Some(Regime::BoundedHarvesting),
            'D' => Some(Regime::Singular),
            _ => None,
        }
    }

    pub fn seeding_is_singular(&self) -> bool {
        matches!(self, Regime::BoundedHarvesting | Regime::Singular)
    }

    pub fn harvesting_is_singular(&self) -> bool {
        matches!(self, Regime::BoundedSeeding | Regime::Singular)
    }

    /// Regimes with bounded harvesting use the reflected, enlarged lattice.
    pub fn reflects(&self) -> bool {
        matches!(self, Regime::BoundedBoth | Regime::BoundedHarvesting)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateBounds {
    pub seed: Vec<Rate>,
    pub harvest: Vec<Rate>,
}

impl RateBounds {
    pub fn new(seed: Vec<Rate>, harvest: Vec<Rate>) -> Result<Self, ModelError> {
        let bounds = RateBounds { seed, harvest };
        bounds.regime()?;
        Ok(bounds)
    }

    /// Same bounds for every species.
    pub fn uniform(d: usize, seed: Rate, harvest: Rate) -> Result<Self, ModelError> {
        Self::new(vec![seed; d], vec![harvest; d])
    }

    pub fn dim(&self) -> usize {
        self.seed.len()
    }

    pub fn regime(&self) -> Result<Regime, ModelError> {
        if self.seed.len() != self.harvest.len() {
            return Err(ModelError::DimensionMismatch {
                what: "harvest bounds",
                expected: self.seed.len(),
                got: self.harvest.len(),
            });
        }
        for (which, rates) in [("seeding", &self.seed), ("harvesting", &self.harvest)] {
            for (i, r) in rates.iter().enumerate() {
                if let Rate::Finite(v) = r {
                    if !(*v >= 0.0) || !v.is_finite() {
                        return Err(ModelError::InvalidRate {
                            which,
                            species: i + 1,
                            value: *v,
                        });
                    }
                }
            }
        }
        let seed_finite = all_or_none(&self.seed, "seeding")?;
        let harvest_finite = all_or_none(&self.harvest, "harvesting")?;
        Ok(match (seed_finite, harvest_finite) {
            (true, false) => Regime::BoundedSeeding,
            (true, true) => Regime::BoundedBoth,
            (false, true) => Regime::BoundedHarvesting,
            (false, false) => Regime::Singular,
        })
    }
}

fn all_or_none(rates: &[Rate], which: &'static str) -> Result<bool, ModelError> {
    let finite = rates.iter().filter(|r| r.is_finite()).count();
    if finite == rates.len() {
        Ok(true)
    } else if finite == 0 {
        Ok(false)
    } else {
        Err(ModelError::MixedFiniteness { which })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionFailure {
    pub point: Vec<f64>,
    pub species: Option<usize>,
    pub detail: String,
}

/// Outcome of one assumption check over a finite set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub check: &'static str,
    pub points_checked: usize,
    pub failures: Vec<AssumptionFailure>,
    pub notes: Vec<String>,
}

impl AssumptionReport {
    fn new(check: &'static str) -> Self {
        AssumptionReport {
            check,
            points_checked: 0,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn first_failure(&self) -> Option<&AssumptionFailure> {
        self.failures.first()
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "pass" } else { "FAIL" };
        write!(
            f,
            "{status}: {} ({} points checked",
            self.check, self.points_checked
        )?;
        if !self.failures.is_empty() {
            write!(f, ", {} failing", self.failures.len())?;
        }
        f.write_str(")")?;
        if let Some(first) = self.first_failure() {
            write!(f, "\n  first failure at {:?}", first.point)?;
            if let Some(i) = first.species {
                write!(f, " species {}", i + 1)?;
            }
            write!(f, ": {}", first.detail)?;
        }
        for note in &self.notes {
            write!(f, "\n  note: {note}")?;
        }
        Ok(())
    }
}

/// `b(0) = 0` and `a(0) = 0`: extinct populations stay extinct without seeding.
pub fn check_origin_equilibrium(model: &ModelSpec) -> AssumptionReport {
    let d = model.dim();
    let zero = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    model.drift(&zero, &mut b);
    model.diff_cov(&zero, &mut a);
    let mut report = AssumptionReport::new("origin is an equilibrium");
    report.points_checked = 1;
    if b.iter().chain(a.iter()).any(|v| *v != 0.0) {
        report.failures.push(AssumptionFailure {
            point: zero,
            species: None,
            detail: format!("b(0) = {b:?}, a(0) = {a:?}"),
        });
    }
    report
}

/// Prices below seeding costs, both positive and non-increasing along every
/// coordinate, checked on the supplied nodes only.
pub fn check_price_cost<I, P>(model: &ModelSpec, nodes: I, spacing: f64) -> AssumptionReport
where
    I: IntoIterator<Item = P>,
    P: AsRef<[f64]>,
{
    let mut report = AssumptionReport::new("price below seeding cost, both positive and non-increasing");
    let d = model.dim();
    for node in nodes {
        let x = node.as_ref();
        report.points_checked += 1;
        for i in 0..d {
            let f = model.price(i, x);
            let g = model.seed_cost(i, x);
            let fail = |detail: String| AssumptionFailure {
                point: x.to_vec(),
                species: Some(i),
                detail,
            };
            if !(f > 0.0) {
                report.failures.push(fail(format!("price must be positive, f = {f}")));
            } else if !(f < g) {
                report.failures.push(fail(format!(
                    "price must be below seeding cost, f = {f} >= g = {g}"
                )));
            }
            // Affine forms are monotone, so one step ahead on the lattice suffices.
            let mut next = x.to_vec();
            next[i] += spacing;
            if model.price(i, &next) > f || model.seed_cost(i, &next) > g {
                report
                    .failures
                    .push(fail("price and cost must be non-increasing".to_string()));
            }
        }
    }
    report
}

/// `a_ii(x) - Σ_{j≠i} |a_ij(x)| >= 0` at every node, which keeps the chain's
/// transition probabilities nonnegative.
pub fn check_diagonal_dominance<I, P>(model: &ModelSpec, nodes: I) -> AssumptionReport
where
    I: IntoIterator<Item = P>,
    P: AsRef<[f64]>,
{
    let d = model.dim();
    let mut a = vec![0.0; d * d];
    let mut report = AssumptionReport::new("diagonal dominance of the covariance");
    for node in nodes {
        let x = node.as_ref();
        report.points_checked += 1;
        model.diff_cov(x, &mut a);
        for i in 0..d {
            let off: f64 = (0..d).filter(|&j| j != i).map(|j| a[i * d + j].abs()).sum();
            let margin = a[i * d + i] - off;
            let asymmetric = (0..d).any(|j| (a[i * d + j] - a[j * d + i]).abs() > 1e-12);
            if margin < 0.0 || asymmetric {
                report.failures.push(AssumptionFailure {
                    point: x.to_vec(),
                    species: Some(i),
                    detail: if asymmetric {
                        "covariance is not symmetric".to_string()
                    } else {
                        format!("a_ii - sum |a_ij| = {margin}")
                    },
                });
                break;
            }
        }
    }
    report
}

/// Sample of points used to probe the growth condition outside `[0, U]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthScan {
    /// The lattice scan covers `[0, multiple * U]^d`.
    pub multiple: f64,
    pub spacing: f64,
    pub radial_points: usize,
    /// Lattice spacing is coarsened until the scan has at most this many points.
    pub max_lattice_points: usize,
}

impl GrowthScan {
    pub fn with_spacing(spacing: f64) -> Self {
        GrowthScan {
            multiple: 3.0,
            spacing,
            radial_points: 100,
            max_lattice_points: 2_000_000,
        }
    }
}

/// Checks `Σ_i [b_i(x) - δ(x_i - U)] f_i < 0` on a finite sample with `|x| > U`.
///
/// A pass is evidence, not proof: the condition quantifies over an unbounded
/// set and only the sampled points are tested.
pub fn check_growth_condition(
    model: &ModelSpec,
    upper: f64,
    scan: &GrowthScan,
) -> Result<AssumptionReport, ModelError> {
    if !model.price_is_constant() {
        return Err(ModelError::NonConstantPrice);
    }
    let d = model.dim();
    let prices: Vec<f64> = model.prices().iter().map(|a| a.base).collect();
    let delta = model.discount();
    let mut report = AssumptionReport::new("growth condition beyond the truncation bound");
    report
        .notes
        .push("finite sample only; a pass is evidence, not proof".to_string());
    let mut b = vec![0.0; d];
    let mut probe = |x: &[f64], report: &mut AssumptionReport| {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= upper {
            return;
        }
        report.points_checked += 1;
        model.drift(x, &mut b);
        let s: f64 = (0..d)
            .map(|i| (b[i] - delta * (x[i] - upper)) * prices[i])
            .sum();
        if !(s < 0.0) {
            report.failures.push(AssumptionFailure {
                point: x.to_vec(),
                species: None,
                detail: format!("sum_i [b_i(x) - delta (x_i - U)] f_i = {s} >= 0"),
            });
        }
    };

    let outer = scan.multiple * upper;
    let mut spacing = scan.spacing;
    while ((outer / spacing).floor() + 1.0).powi(d as i32) > scan.max_lattice_points as f64 {
        spacing *= 2.0;
    }
    let per_axis = (outer / spacing).floor() as usize + 1;
    let total = per_axis.pow(d as u32);
    let mut x = vec![0.0; d];
    for flat in 0..total {
        let mut rest = flat;
        for xi in x.iter_mut() {
            *xi = (rest % per_axis) as f64 * spacing;
            rest /= per_axis;
        }
        probe(&x, &mut report);
    }
    // Radial points along the diagonal ray, just outside U up to the outer shell.
    let dir = 1.0 / (d as f64).sqrt();
    let n = scan.radial_points.max(1);
    for k in 0..n {
        let r = upper * (1.0 + 1e-6) + (outer - upper) * (k as f64) / (n as f64);
        x.iter_mut().for_each(|xi| *xi = r * dir);
        probe(&x, &mut report);
    }
    Ok(report)
}
