//! Threshold extraction, region labels and parameter sweeps.

use std::fmt;

use thiserror::Error;

use crate::chain::{ControlAction, Grid};
use crate::model::{ModelError, ModelSpec, Rate, RateBounds};
use crate::solver::{initial_values, solve_from, Solution, SolveError, SolveParams};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("expected a {expected}-dimensional solution, got dimension {got}")]
    Dimension { expected: usize, got: usize },
    #[error("species index {species} out of range for dimension {dim}")]
    Species { species: usize, dim: usize },
    #[error("sweep values must be strictly increasing and non-empty")]
    SweepValues,
    #[error("probe state {0:?} is not a lattice node")]
    ProbeOffGrid(Vec<f64>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Seeding and harvesting thresholds along one species axis.
///
/// In one dimension `l1`, `l2` hold a single entry. In two dimensions entry
/// `k` belongs to the line where the other species sits at `lines[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub species: usize,
    pub lines: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub has_seeding: Vec<bool>,
    pub has_harvesting: Vec<bool>,
    /// Nodes whose action breaks the seed / idle / harvest block structure.
    pub contiguity_warnings: Vec<usize>,
}

impl ThresholdReport {
    /// The scalar thresholds of a one-dimensional report.
    pub fn scalar(&self) -> (f64, f64) {
        (self.l1[0], self.l2[0])
    }
}

impl fmt::Display for ThresholdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lines.is_empty() {
            write!(f, "L1={:.2} L2={:.2}", self.l1[0], self.l2[0])?;
        } else {
            write!(
                f,
                "species {}: {} lines, L1 in [{:.2}, {:.2}], L2 in [{:.2}, {:.2}]",
                self.species + 1,
                self.lines.len(),
                min(&self.l1),
                max(&self.l1),
                min(&self.l2),
                max(&self.l2)
            )?;
        }
        if !self.contiguity_warnings.is_empty() {
            write!(f, " ({} contiguity warnings)", self.contiguity_warnings.len())?;
        }
        Ok(())
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

struct LineThresholds {
    l1: f64,
    l2: f64,
    has_seeding: bool,
    has_harvesting: bool,
    warnings: Vec<usize>,
}

/// Thresholds along one line of nodes. `nodes[k]` is the node at step `k`
/// along the species axis; the last entry is the forced boundary node.
fn line_thresholds(
    policy: &[ControlAction],
    nodes: &[usize],
    species: usize,
    h: f64,
    extent: f64,
) -> LineThresholds {
    let last = nodes.len() - 1;
    let seeds = |k: usize| policy[nodes[k]].seeds(species);
    let harvests = |k: usize| policy[nodes[k]].harvests(species);

    let mut seed_end = None;
    for k in 0..last {
        if seeds(k) {
            seed_end = Some(k);
        } else {
            break;
        }
    }
    let mut harvest_start = None;
    for k in (0..last).rev() {
        if harvests(k) {
            harvest_start = Some(k);
        } else {
            break;
        }
    }
    // Nothing can be harvested from an extinct population, so a harvesting
    // block reaching the first positive level covers the whole axis.
    if harvest_start == Some(1) && !seeds(0) {
        harvest_start = Some(0);
    }

    let seed_top = seed_end.map_or(0, |k| k + 1);
    let harvest_bottom = harvest_start.unwrap_or(last);
    let warnings = (seed_top..harvest_bottom)
        .filter(|&k| seeds(k) || harvests(k))
        .map(|k| nodes[k])
        .collect();

    LineThresholds {
        l1: seed_end.map_or(0.0, |k| k as f64 * h),
        l2: harvest_start.map_or(extent, |k| k as f64 * h),
        has_seeding: seed_end.is_some(),
        has_harvesting: harvest_start.is_some(),
        warnings,
    }
}

/// `L1` is the top of the seeding block touching 0 (0 if there is none) and
/// `L2` the bottom of the harvesting block touching the boundary (the extent
/// if there is none). Isolated actions outside the blocks become warnings.
pub fn extract_thresholds_1d(solution: &Solution) -> Result<ThresholdReport, AnalysisError> {
    let grid = &solution.grid;
    if grid.dim() != 1 {
        return Err(AnalysisError::Dimension {
            expected: 1,
            got: grid.dim(),
        });
    }
    let nodes: Vec<usize> = (0..grid.node_count()).collect();
    let t = line_thresholds(&solution.policy, &nodes, 0, grid.h(), grid.extent());
    Ok(ThresholdReport {
        species: 0,
        lines: Vec::new(),
        l1: vec![t.l1],
        l2: vec![t.l2],
        has_seeding: vec![t.has_seeding],
        has_harvesting: vec![t.has_harvesting],
        contiguity_warnings: t.warnings,
    })
}

/// Applies the one-dimensional extraction along the `species` axis on every
/// line of the other species' coordinate, excluding the forced boundary line.
pub fn extract_threshold_curves_2d(
    solution: &Solution,
    species: usize,
) -> Result<ThresholdReport, AnalysisError> {
    let grid = &solution.grid;
    if grid.dim() != 2 {
        return Err(AnalysisError::Dimension {
            expected: 2,
            got: grid.dim(),
        });
    }
    if species > 1 {
        return Err(AnalysisError::Species { species, dim: 2 });
    }
    let other = 1 - species;
    let max = grid.max_step();
    let mut report = ThresholdReport {
        species,
        lines: Vec::with_capacity(max),
        l1: Vec::with_capacity(max),
        l2: Vec::with_capacity(max),
        has_seeding: Vec::with_capacity(max),
        has_harvesting: Vec::with_capacity(max),
        contiguity_warnings: Vec::new(),
    };
    let mut ks = [0usize; 2];
    for j in 0..max {
        ks[other] = j;
        let nodes: Vec<usize> = (0..=max)
            .map(|k| {
                ks[species] = k;
                grid.index_of(&ks)
            })
            .collect();
        let t = line_thresholds(&solution.policy, &nodes, species, grid.h(), grid.extent());
        report.lines.push(grid.coordinate(j));
        report.l1.push(t.l1);
        report.l2.push(t.l2);
        report.has_seeding.push(t.has_seeding);
        report.has_harvesting.push(t.has_harvesting);
        report.contiguity_warnings.extend(t.warnings);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionLabel {
    None,
    Seed(usize),
    Harvest(usize),
    /// Several species controlled at once; the full rate vectors.
    Mixed { seed: Vec<f64>, harvest: Vec<f64> },
    Reflect(usize),
}

impl RegionLabel {
    pub fn of(action: &ControlAction) -> Self {
        match action {
            ControlAction::HarvestJump(i) => RegionLabel::Harvest(*i),
            ControlAction::SeedJump(i) => RegionLabel::Seed(*i),
            ControlAction::Reflect(i) => RegionLabel::Reflect(*i),
            ControlAction::Diffusion { seed, harvest } => {
                let active: Vec<usize> = (0..seed.len())
                    .filter(|&i| seed[i] > 0.0 || harvest[i] > 0.0)
                    .collect();
                match active.as_slice() {
                    [] => RegionLabel::None,
                    [i] if seed[*i] > 0.0 => RegionLabel::Seed(*i),
                    [i] => RegionLabel::Harvest(*i),
                    _ => RegionLabel::Mixed {
                        seed: seed.clone(),
                        harvest: harvest.clone(),
                    },
                }
            }
        }
    }

    pub fn seeds(&self, species: usize) -> bool {
        match self {
            RegionLabel::Seed(i) => *i == species,
            RegionLabel::Mixed { seed, .. } => seed[species] > 0.0,
            _ => false,
        }
    }

    pub fn harvests(&self, species: usize) -> bool {
        match self {
            RegionLabel::Harvest(i) => *i == species,
            RegionLabel::Mixed { harvest, .. } => harvest[species] > 0.0,
            _ => false,
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionLabel::None => write!(f, "none"),
            RegionLabel::Seed(i) => write!(f, "seed{}", i + 1),
            RegionLabel::Harvest(i) => write!(f, "harvest{}", i + 1),
            RegionLabel::Mixed { seed, harvest } => write!(f, "mixed(c={seed:?}, r={harvest:?})"),
            RegionLabel::Reflect(i) => write!(f, "reflect{}", i + 1),
        }
    }
}

/// Per-node region labels.
pub fn classify_regions(solution: &Solution) -> Vec<RegionLabel> {
    solution.policy.iter().map(RegionLabel::of).collect()
}

/// Counts of each simple label, for summaries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionSummary {
    pub none: usize,
    pub seed: Vec<usize>,
    pub harvest: Vec<usize>,
    pub mixed: usize,
    pub boundary: usize,
}

pub fn summarize_regions(labels: &[RegionLabel], dim: usize) -> RegionSummary {
    let mut s = RegionSummary {
        seed: vec![0; dim],
        harvest: vec![0; dim],
        ..RegionSummary::default()
    };
    for label in labels {
        match label {
            RegionLabel::None => s.none += 1,
            RegionLabel::Seed(i) => s.seed[*i] += 1,
            RegionLabel::Harvest(i) => s.harvest[*i] += 1,
            RegionLabel::Mixed { .. } => s.mixed += 1,
            RegionLabel::Reflect(_) => s.boundary += 1,
        }
    }
    s
}

impl fmt::Display for RegionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "none={}", self.none)?;
        for (i, n) in self.seed.iter().enumerate() {
            write!(f, " seed{}={}", i + 1, n)?;
        }
        for (i, n) in self.harvest.iter().enumerate() {
            write!(f, " harvest{}={}", i + 1, n)?;
        }
        write!(f, " mixed={} boundary={}", self.mixed, self.boundary)
    }
}

/// Nodes where harvesting (of `species`, or of any species when `None`)
/// does not continue one step up along `axis`. An empty result means the
/// harvesting region is an up-set in that direction. Forced boundary nodes
/// are skipped.
pub fn upset_violations(solution: &Solution, axis: usize, species: Option<usize>) -> Vec<usize> {
    let grid = &solution.grid;
    let max = grid.max_step();
    let stride = grid.stride(axis);
    let harvests = |a: &ControlAction| match species {
        Some(i) => a.harvests(i),
        None => (0..grid.dim()).any(|i| a.harvests(i)),
    };
    let mut ks = vec![0usize; grid.dim()];
    (0..grid.node_count())
        .filter(|&n| {
            grid.multi_index(n, &mut ks);
            if ks.iter().any(|&k| k == max) || ks[axis] + 1 >= max {
                return false;
            }
            harvests(&solution.policy[n]) && !harvests(&solution.policy[n + stride])
        })
        .collect()
}

/// Which scalar a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepParameter {
    /// Maximal seeding rate λ of every species.
    SeedBound,
    /// Maximal harvesting rate μ of every species.
    HarvestBound,
    /// A named built-in model coefficient such as `sigma`.
    Coefficient(String),
}

impl SweepParameter {
    pub fn parse(name: &str) -> Self {
        match name {
            "lambda" | "seed_bound" => SweepParameter::SeedBound,
            "mu" | "harvest_bound" => SweepParameter::HarvestBound,
            other => SweepParameter::Coefficient(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            SweepParameter::SeedBound => "lambda",
            SweepParameter::HarvestBound => "mu",
            SweepParameter::Coefficient(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    /// Strictly increasing; `f64::INFINITY` means unbounded for rate sweeps.
    pub values: Vec<f64>,
    /// States at which V is recorded for every value.
    pub probes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub outcome: Result<SweepOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: ThresholdReport,
    pub probe_values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub parameter: String,
    pub probes: Vec<Vec<f64>>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Per-point `(L1, L2)` of one-dimensional sweeps; `None` for failures.
    pub fn thresholds(&self) -> Vec<Option<(f64, f64)>> {
        self.points
            .iter()
            .map(|p| p.outcome.as_ref().ok().map(|o| o.report.scalar()))
            .collect()
    }
}

/// Whether `values` is monotone in the given direction allowing each step
/// to go the wrong way by at most `slack`.
pub fn is_monotone(values: &[f64], nondecreasing: bool, slack: f64) -> bool {
    values.windows(2).all(|w| {
        if nondecreasing {
            w[1] >= w[0] - slack
        } else {
            w[1] <= w[0] + slack
        }
    })
}

fn rate(value: f64) -> Rate {
    if value.is_infinite() {
        Rate::Unbounded
    } else {
        Rate::Finite(value)
    }
}

/// Solves once per sweep value, warm-starting from the previous value
/// whenever the lattice is unchanged, and extracts thresholds. Failed points
/// are recorded and the sweep continues.
pub fn sweep(
    model: &ModelSpec,
    bounds: &RateBounds,
    upper: f64,
    h: f64,
    params: &SolveParams,
    spec: &SweepSpec,
) -> Result<SweepResult, AnalysisError> {
    if spec.values.is_empty() || spec.values.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(AnalysisError::SweepValues);
    }
    let d = model.dim();
    let mut previous: Option<(Grid, Vec<f64>)> = None;
    let mut points = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let outcome = sweep_point(model, bounds, upper, h, params, spec, value, d, &mut previous);
        if let Err(e) = &outcome {
            log::warn!("sweep {}={}: {}", spec.parameter.name(), value, e);
        }
        points.push(SweepPoint { value, outcome });
    }
    Ok(SweepResult {
        parameter: spec.parameter.name().to_string(),
        probes: spec.probes.clone(),
        points,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep_point(
    model: &ModelSpec,
    bounds: &RateBounds,
    upper: f64,
    h: f64,
    params: &SolveParams,
    spec: &SweepSpec,
    value: f64,
    d: usize,
    previous: &mut Option<(Grid, Vec<f64>)>,
) -> Result<SweepOutcome, String> {
    let (model, bounds) = match &spec.parameter {
        SweepParameter::SeedBound => (
            model.clone(),
            RateBounds::new(vec![rate(value); d], bounds.harvest.clone()),
        ),
        SweepParameter::HarvestBound => (
            model.clone(),
            RateBounds::new(bounds.seed.clone(), vec![rate(value); d]),
        ),
        SweepParameter::Coefficient(name) => (
            model.with_coefficient(name, value).map_err(|e| e.to_string())?,
            Ok(bounds.clone()),
        ),
    };
    let bounds = bounds.map_err(|e| e.to_string())?;
    let regime = bounds.regime().map_err(|e| e.to_string())?;
    let grid = Grid::build(upper, h, regime, d).map_err(|e| e.to_string())?;
    let start = match previous.take() {
        Some((g, v)) if g == grid => v,
        _ => initial_values(&model, &grid, regime),
    };
    let solution = match solve_from(&model, &bounds, &grid, params, start) {
        Ok(s) => s,
        Err(SolveError::NotConverged(s)) => {
            log::warn!("sweep point {} did not converge", value);
            *s
        }
        Err(e) => return Err(e.to_string()),
    };
    let report = match d {
        1 => extract_thresholds_1d(&solution),
        _ => extract_threshold_curves_2d(&solution, 0),
    }
    .map_err(|e| e.to_string())?;
    let probe_values = spec
        .probes
        .iter()
        .map(|x| solution.value_at(x).unwrap_or(f64::NAN))
        .collect();
    let outcome = SweepOutcome {
        report,
        probe_values,
        iterations: solution.iterations,
        converged: solution.converged,
    };
    *previous = Some((grid, solution.values));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Regime;

    fn solution_with(policy: Vec<ControlAction>, h: f64) -> Solution {
        let n = policy.len();
        let upper = (n - 1) as f64 * h;
        let grid = Grid::build(upper, h, Regime::BoundedSeeding, 1).unwrap();
        assert_eq!(grid.node_count(), n);
        Solution {
            grid,
            regime: Regime::BoundedSeeding,
            bounds: RateBounds::uniform(1, Rate::Finite(1.0), Rate::Unbounded).unwrap(),
            values: vec![0.0; n],
            policy,
            iterations: 1,
            residual_history: vec![0.0],
            converged: true,
            bellman_residual: 0.0,
            max_decrease: 0.0,
        }
    }

    fn seed() -> ControlAction {
        ControlAction::Diffusion {
            seed: vec![1.0],
            harvest: vec![0.0],
        }
    }

    fn idle() -> ControlAction {
        ControlAction::idle(1)
    }

    fn harvest() -> ControlAction {
        ControlAction::Diffusion {
            seed: vec![0.0],
            harvest: vec![1.0],
        }
    }

    #[test]
    fn five_node_example() {
        let s = solution_with(
            vec![seed(), idle(), idle(), harvest(), ControlAction::HarvestJump(0)],
            1.0,
        );
        let r = extract_thresholds_1d(&s).unwrap();
        assert_eq!(r.scalar(), (0.0, 3.0));
        assert!(r.contiguity_warnings.is_empty());
        assert!(r.has_seeding[0] && r.has_harvesting[0]);
    }

    #[test]
    fn empty_regions() {
        let s = solution_with(vec![idle(), idle(), idle(), ControlAction::HarvestJump(0)], 0.5);
        let r = extract_thresholds_1d(&s).unwrap();
        assert_eq!(r.scalar(), (0.0, 1.5));
        assert!(!r.has_seeding[0] && !r.has_harvesting[0]);
    }

    #[test]
    fn stray_actions_are_warnings() {
        let s = solution_with(
            vec![seed(), seed(), idle(), seed(), idle(), harvest(), idle(), harvest(), harvest(), ControlAction::HarvestJump(0)],
            0.1,
        );
        let r = extract_thresholds_1d(&s).unwrap();
        let (l1, l2) = r.scalar();
        assert!((l1 - 0.1).abs() < 1e-12);
        assert!((l2 - 0.7).abs() < 1e-12);
        assert_eq!(r.contiguity_warnings, vec![3, 5]);
    }

    #[test]
    fn harvest_everywhere_gives_zero_l2() {
        let mut p = vec![idle()];
        p.extend((0..4).map(|_| harvest()));
        p.push(ControlAction::HarvestJump(0));
        let r = extract_thresholds_1d(&solution_with(p, 0.5)).unwrap();
        assert_eq!(r.scalar(), (0.0, 0.0));
    }

    #[test]
    fn labels() {
        assert_eq!(RegionLabel::of(&idle()), RegionLabel::None);
        assert_eq!(RegionLabel::of(&seed()), RegionLabel::Seed(0));
        assert_eq!(RegionLabel::of(&ControlAction::HarvestJump(1)), RegionLabel::Harvest(1));
        let mixed = ControlAction::Diffusion {
            seed: vec![0.5, 0.0],
            harvest: vec![0.0, 4.0],
        };
        let l = RegionLabel::of(&mixed);
        assert!(l.seeds(0) && l.harvests(1) && !l.seeds(1));
    }

    #[test]
    fn monotone_with_slack() {
        assert!(is_monotone(&[0.1, 0.2, 0.19, 0.3], true, 0.01 + 1e-12));
        assert!(!is_monotone(&[0.1, 0.2, 0.18, 0.3], true, 0.01 + 1e-12));
        assert!(is_monotone(&[3.0, 2.0, 2.0, 0.0], false, 0.0));
    }
}
