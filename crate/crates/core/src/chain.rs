//! Lattice state space and locally consistent transition stencils.
//!
//! For a diffusion step under effective drift `v = b(x) + c - r` the chain
//! moves one lattice step along an axis, one diagonal step when the
//! covariance has off-diagonal mass, or stays put; the interpolation interval
//! is `Δt = h² / Q_h` with
//!
//! ```text
//! Q_h = Σ a_ii - ½ Σ_{i≠j} |a_ij| + h Σ |v_i| + h
//! ```
//!
//! Jump steps (singular harvesting, singular seeding and reflection) move
//! exactly one species by exactly one lattice step and take no time.

use std::fmt;

use thiserror::Error;

use crate::model::{ModelSpec, RateBounds, Regime};

/// Default cap on the number of lattice nodes.
pub const DEFAULT_NODE_CAP: usize = 10_000_000;

const PROB_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("grid parameters must be positive: U = {upper}, h = {h}, d = {dim}")]
    InvalidGrid { upper: f64, h: f64, dim: usize },
    #[error("lattice would have {nodes} nodes, above the cap of {cap}")]
    DimensionTooLarge { nodes: f64, cap: usize },
    #[error("negative transition probability {value} at node {node} (species {species}); the covariance is not diagonally dominant there")]
    NegativeProbability {
        node: usize,
        species: usize,
        value: f64,
    },
    #[error("transition from node {node} along species {species} leaves the lattice")]
    NeighborOutOfGrid { node: usize, species: usize },
    #[error("{action} at node {node} leaves the lattice")]
    JumpOutOfGrid { node: usize, action: ControlAction },
    #[error("diffusion step requested at boundary node {node}, where a boundary action is forced")]
    BoundaryNode { node: usize },
}

/// Regular lattice `{0, h, 2h, …, extent}^d`, indexed lexicographically with
/// the first species varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: f64,
    upper: f64,
    requested_upper: f64,
    extent: f64,
    dim: usize,
    per_axis: usize,
    node_count: usize,
}

impl Grid {
    pub fn build(upper: f64, h: f64, regime: Regime, dim: usize) -> Result<Self, ChainError> {
        Self::build_with_cap(upper, h, regime, dim, DEFAULT_NODE_CAP)
    }

    /// Builds the lattice for `regime`. `U` is rounded up to a multiple of
    /// `h` (with a logged warning); reflecting regimes get one extra layer.
    pub fn build_with_cap(
        upper: f64,
        h: f64,
        regime: Regime,
        dim: usize,
        cap: usize,
    ) -> Result<Self, ChainError> {
        if !(upper > 0.0 && h > 0.0 && upper.is_finite() && h.is_finite()) || dim == 0 {
            return Err(ChainError::InvalidGrid { upper, h, dim });
        }
        let ratio = upper / h;
        let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0) {
            ratio.round()
        } else {
            ratio.ceil()
        };
        let rounded = steps * h;
        if steps * h != upper && (rounded - upper).abs() > 1e-9 * upper {
            log::warn!("U = {upper} is not a multiple of h = {h}; using U = {rounded}");
        }
        let extra = if regime.reflects() { 1.0 } else { 0.0 };
        let per_axis_f = steps + extra + 1.0;
        let nodes = per_axis_f.powi(dim as i32);
        if nodes > cap as f64 {
            return Err(ChainError::DimensionTooLarge { nodes, cap });
        }
        let per_axis = per_axis_f as usize;
        Ok(Grid {
            h,
            upper: rounded,
            requested_upper: upper,
            extent: (steps + extra) * h,
            dim,
            per_axis,
            node_count: per_axis.pow(dim as u32),
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Truncation bound `U` (after rounding to a multiple of `h`).
    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn requested_upper(&self) -> f64 {
        self.requested_upper
    }

    pub fn was_rounded(&self) -> bool {
        (self.upper - self.requested_upper).abs() > 1e-9 * self.requested_upper
    }

    /// Largest coordinate value: `U`, or `U + h` on reflecting lattices.
    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    /// Index of the last node along each axis.
    pub fn max_step(&self) -> usize {
        self.per_axis - 1
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    #[inline]
    pub fn coordinate(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn multi_index(&self, node: usize, out: &mut [usize]) {
        let mut rest = node;
        for k in out.iter_mut() {
            *k = rest % self.per_axis;
            rest /= self.per_axis;
        }
    }

    pub fn index_of(&self, ks: &[usize]) -> usize {
        ks.iter()
            .rev()
            .fold(0, |acc, &k| acc * self.per_axis + k)
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for x in out.iter_mut() {
            *x = self.coordinate(rest % self.per_axis);
            rest /= self.per_axis;
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.coords_into(node, &mut x);
        x
    }

    /// Stride between neighbours along species `i`.
    #[inline]
    pub fn stride(&self, i: usize) -> usize {
        self.per_axis.pow(i as u32)
    }

    /// Nearest node to an arbitrary point, clamped into the lattice.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for (i, &xi) in x.iter().enumerate() {
            let k = (xi / self.h).round().clamp(0.0, self.max_step() as f64) as usize;
            node += k * self.stride(i);
        }
        node
    }

    /// The node at exactly `x` (to 1e-9 h), if `x` is a lattice point.
    pub fn node_at(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim {
            return None;
        }
        let mut node = 0;
        for (i, &xi) in x.iter().enumerate() {
            let r = xi / self.h;
            let k = r.round();
            if (r - k).abs() > 1e-9 || k < 0.0 || k > self.max_step() as f64 {
                return None;
            }
            node += k as usize * self.stride(i);
        }
        Some(node)
    }

    /// All node coordinates in index order.
    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.node_count).map(move |n| self.coords(n))
    }

    /// Lowest species whose coordinate sits on the outer boundary.
    pub fn saturated_species(&self, node: usize) -> Option<usize> {
        let mut rest = node;
        for i in 0..self.dim {
            if rest % self.per_axis == self.max_step() {
                return Some(i);
            }
            rest /= self.per_axis;
        }
        None
    }
}

/// One control choice at a lattice node. Species indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    /// Diffusion step with per-species seeding rates `seed` and harvesting
    /// rates `harvest`; never both positive for the same species.
    Diffusion { seed: Vec<f64>, harvest: Vec<f64> },
    HarvestJump(usize),
    SeedJump(usize),
    Reflect(usize),
}

impl ControlAction {
    pub fn idle(d: usize) -> Self {
        ControlAction::Diffusion {
            seed: vec![0.0; d],
            harvest: vec![0.0; d],
        }
    }

    pub fn is_jump(&self) -> bool {
        !matches!(self, ControlAction::Diffusion { .. })
    }

    /// Signed net rate `q = c - r` of a diffusion action.
    pub fn net_rate(&self) -> Option<Vec<f64>> {
        match self {
            ControlAction::Diffusion { seed, harvest } => {
                Some(seed.iter().zip(harvest).map(|(c, r)| c - r).collect())
            }
            _ => None,
        }
    }

    /// Integer action code: 0 diffusion, `+i` harvest jump, `-i` seed jump,
    /// `100 + i` reflection (species numbered from 1).
    pub fn code(&self) -> i32 {
        match *self {
            ControlAction::Diffusion { .. } => 0,
            ControlAction::HarvestJump(i) => i as i32 + 1,
            ControlAction::SeedJump(i) => -(i as i32 + 1),
            ControlAction::Reflect(i) => 100 + i as i32 + 1,
        }
    }

    /// Seeding activity of species `i` (positive rate or seed jump).
    pub fn seeds(&self, i: usize) -> bool {
        match self {
            ControlAction::Diffusion { seed, .. } => seed[i] > 0.0,
            ControlAction::SeedJump(j) => *j == i,
            _ => false,
        }
    }

    /// Harvesting activity of species `i` (positive rate or harvest jump).
    pub fn harvests(&self, i: usize) -> bool {
        match self {
            ControlAction::Diffusion { harvest, .. } => harvest[i] > 0.0,
            ControlAction::HarvestJump(j) => *j == i,
            _ => false,
        }
    }

    /// Ordering key for deterministic tie-breaking: idle diffusion first,
    /// then fewer active components, lower species, harvesting before
    /// seeding, rates before jumps, smaller total rate.
    pub(crate) fn priority(&self) -> (usize, usize, u8, u8, f64) {
        match self {
            ControlAction::Diffusion { seed, harvest } => {
                let active: Vec<(usize, u8)> = (0..seed.len())
                    .filter_map(|i| {
                        if harvest[i] > 0.0 {
                            Some((i, 0))
                        } else if seed[i] > 0.0 {
                            Some((i, 1))
                        } else {
                            None
                        }
                    })
                    .collect();
                let total: f64 = seed.iter().chain(harvest).sum();
                match active.first() {
                    None => (0, 0, 0, 0, 0.0),
                    Some(&(i, kind)) => (active.len(), i, kind, 0, total),
                }
            }
            ControlAction::HarvestJump(i) => (1, *i, 0, 1, 0.0),
            ControlAction::SeedJump(i) => (1, *i, 1, 1, 0.0),
            ControlAction::Reflect(i) => (1, *i, 2, 1, 0.0),
        }
    }
}

impl fmt::Display for ControlAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlAction::Diffusion { seed, harvest } => {
                write!(f, "diffusion(seed={seed:?}, harvest={harvest:?})")
            }
            ControlAction::HarvestJump(i) => write!(f, "harvest-jump({})", i + 1),
            ControlAction::SeedJump(i) => write!(f, "seed-jump({})", i + 1),
            ControlAction::Reflect(i) => write!(f, "reflect({})", i + 1),
        }
    }
}

/// Transition law of one (node, action) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// `(target node, probability)`, sorted by target, no duplicates.
    pub entries: Vec<(usize, f64)>,
    /// Interpolation interval; zero for jump steps.
    pub dt: f64,
    /// Running reward density `f·r - g·c` of a diffusion step.
    pub reward_rate: f64,
    /// Lump reward of a jump step.
    pub reward_jump: f64,
}

impl Stencil {
    pub fn probability_sum(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

/// Builds the diffusion stencil at `node` with seeding rates `seed` and
/// harvesting rates `harvest`.
pub fn diffusion_stencil(
    model: &ModelSpec,
    grid: &Grid,
    node: usize,
    seed: &[f64],
    harvest: &[f64],
) -> Result<Stencil, ChainError> {
    let d = grid.dim();
    let h = grid.h();
    let max = grid.max_step();
    let mut ks = vec![0usize; d];
    grid.multi_index(node, &mut ks);
    if ks.iter().any(|&k| k == max) {
        return Err(ChainError::BoundaryNode { node });
    }
    let x: Vec<f64> = ks.iter().map(|&k| grid.coordinate(k)).collect();
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    model.drift(&x, &mut b);
    model.diff_cov(&x, &mut a);
    let v: Vec<f64> = (0..d).map(|i| b[i] + seed[i] - harvest[i]).collect();

    let off: Vec<f64> = (0..d)
        .map(|i| (0..d).filter(|&j| j != i).map(|j| a[i * d + j].abs()).sum())
        .collect();
    let q = (0..d).map(|i| a[i * d + i]).sum::<f64>() - 0.5 * off.iter().sum::<f64>()
        + h * v.iter().map(|vi| vi.abs()).sum::<f64>()
        + h;
    let dt = h * h / q;

    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * d * d + 1);
    entries.push((node, h / q));
    for i in 0..d {
        let base = 0.5 * (a[i * d + i] - off[i]);
        let up = (base + v[i].max(0.0) * h) / q;
        let down = (base + (-v[i]).max(0.0) * h) / q;
        for (p, step) in [(up, 1i64), (down, -1i64)] {
            if p < -PROB_TOL {
                return Err(ChainError::NegativeProbability {
                    node,
                    species: i + 1,
                    value: p,
                });
            }
            if p <= 0.0 {
                continue;
            }
            let k = ks[i] as i64 + step;
            if k < 0 || k > max as i64 {
                return Err(ChainError::NeighborOutOfGrid {
                    node,
                    species: i + 1,
                });
            }
            let mut target = ks.clone();
            target[i] = k as usize;
            entries.push((grid.index_of(&target), p));
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let aij = a[i * d + j];
            if aij == 0.0 {
                continue;
            }
            let p = aij.abs() / (2.0 * q);
            let (si, sj): (i64, i64) = if aij > 0.0 { (1, 1) } else { (1, -1) };
            for sign in [1i64, -1] {
                // Diagonal targets outside the lattice are projected onto it.
                let mut target = ks.clone();
                target[i] = (ks[i] as i64 + sign * si).clamp(0, max as i64) as usize;
                target[j] = (ks[j] as i64 + sign * sj).clamp(0, max as i64) as usize;
                entries.push((grid.index_of(&target), p));
            }
        }
    }
    entries.sort_by_key(|e| e.0);
    entries.dedup_by(|later, earlier| {
        if later.0 == earlier.0 {
            earlier.1 += later.1;
            true
        } else {
            false
        }
    });

    let reward_rate = (0..d)
        .map(|i| model.price(i, &x) * harvest[i] - model.seed_cost(i, &x) * seed[i])
        .sum();
    Ok(Stencil {
        entries,
        dt,
        reward_rate,
        reward_jump: 0.0,
    })
}

/// Builds the deterministic, instantaneous stencil of a jump action.
pub fn jump_stencil(
    model: &ModelSpec,
    grid: &Grid,
    node: usize,
    action: &ControlAction,
) -> Result<Stencil, ChainError> {
    let d = grid.dim();
    let mut ks = vec![0usize; d];
    grid.multi_index(node, &mut ks);
    let x: Vec<f64> = ks.iter().map(|&k| grid.coordinate(k)).collect();
    let h = grid.h();
    let out = || ChainError::JumpOutOfGrid {
        node,
        action: action.clone(),
    };
    let (target, reward) = match *action {
        ControlAction::HarvestJump(i) | ControlAction::Reflect(i) => {
            if i >= d || ks[i] == 0 {
                return Err(out());
            }
            let reward = if matches!(action, ControlAction::HarvestJump(_)) {
                model.price(i, &x) * h
            } else {
                0.0
            };
            (node - grid.stride(i), reward)
        }
        ControlAction::SeedJump(i) => {
            if i >= d || ks[i] == grid.max_step() {
                return Err(out());
            }
            (node + grid.stride(i), -model.seed_cost(i, &x) * h)
        }
        ControlAction::Diffusion { .. } => return Err(out()),
    };
    Ok(Stencil {
        entries: vec![(target, 1.0)],
        dt: 0.0,
        reward_rate: 0.0,
        reward_jump: reward,
    })
}

/// Stencil for any action.
pub fn stencil(
    model: &ModelSpec,
    grid: &Grid,
    node: usize,
    action: &ControlAction,
) -> Result<Stencil, ChainError> {
    match action {
        ControlAction::Diffusion { seed, harvest } => {
            diffusion_stencil(model, grid, node, seed, harvest)
        }
        _ => jump_stencil(model, grid, node, action),
    }
}

/// `n` equispaced levels on `[0, max]` (endpoints only when `n == 2`),
/// deduplicated when `max == 0`.
pub fn rate_levels(max: f64, n: usize) -> Vec<f64> {
    if max == 0.0 || n < 2 {
        return vec![0.0];
    }
    (0..n)
        .map(|k| if k == n - 1 { max } else { max * k as f64 / (n - 1) as f64 })
        .collect()
}

/// Per-species `(seed, harvest)` rate options of the diffusion actions.
fn species_options(regime: Regime, bounds: &RateBounds, levels: usize, i: usize) -> Vec<(f64, f64)> {
    let seed = bounds.seed[i].value().map(|m| rate_levels(m, levels));
    let harvest = bounds.harvest[i].value().map(|m| rate_levels(m, levels));
    let mut options = vec![(0.0, 0.0)];
    match regime {
        Regime::BoundedSeeding => {
            options.extend(seed.unwrap_or_default().into_iter().filter(|&c| c > 0.0).map(|c| (c, 0.0)));
        }
        Regime::BoundedBoth => {
            options.extend(seed.unwrap_or_default().into_iter().filter(|&c| c > 0.0).map(|c| (c, 0.0)));
            options.extend(harvest.unwrap_or_default().into_iter().filter(|&r| r > 0.0).map(|r| (0.0, r)));
        }
        Regime::BoundedHarvesting => {
            options.extend(harvest.unwrap_or_default().into_iter().filter(|&r| r > 0.0).map(|r| (0.0, r)));
        }
        Regime::Singular => {}
    }
    options
}

/// Every diffusion rate profile admissible somewhere on the lattice (before
/// the per-node restriction that extinct species cannot be harvested).
pub fn diffusion_profiles(
    regime: Regime,
    bounds: &RateBounds,
    control_levels: usize,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = bounds.dim();
    let per_species: Vec<Vec<(f64, f64)>> = (0..d)
        .map(|i| species_options(regime, bounds, control_levels, i))
        .collect();
    let mut profiles = vec![(Vec::with_capacity(d), Vec::with_capacity(d))];
    for options in &per_species {
        let mut next = Vec::with_capacity(profiles.len() * options.len());
        for (seed, harvest) in &profiles {
            for &(c, r) in options {
                let mut s = seed.clone();
                let mut h = harvest.clone();
                s.push(c);
                h.push(r);
                next.push((s, h));
            }
        }
        profiles = next;
    }
    profiles
}

/// Admissible actions at `node`, sorted by tie-break priority.
///
/// On the outer boundary the single forced action is returned: a harvest
/// jump on the lowest saturated species (non-reflecting regimes) or a
/// reflection (reflecting regimes). Harvesting rates are not offered for
/// species that are extinct at the node, since the chain would leave the
/// nonnegative orthant.
pub fn admissible_actions(
    grid: &Grid,
    node: usize,
    regime: Regime,
    bounds: &RateBounds,
    control_levels: usize,
) -> Vec<ControlAction> {
    if let Some(i) = grid.saturated_species(node) {
        return vec![if regime.reflects() {
            ControlAction::Reflect(i)
        } else {
            ControlAction::HarvestJump(i)
        }];
    }
    let d = grid.dim();
    let mut ks = vec![0usize; d];
    grid.multi_index(node, &mut ks);
    let mut actions: Vec<ControlAction> = diffusion_profiles(regime, bounds, control_levels)
        .into_iter()
        .filter(|(_, harvest)| (0..d).all(|i| harvest[i] == 0.0 || ks[i] > 0))
        .map(|(seed, harvest)| ControlAction::Diffusion { seed, harvest })
        .collect();
    for i in 0..d {
        if regime.harvesting_is_singular() && ks[i] >= 1 {
            actions.push(ControlAction::HarvestJump(i));
        }
        if regime.seeding_is_singular() && ks[i] < grid.max_step() {
            actions.push(ControlAction::SeedJump(i));
        }
    }
    actions.sort_by(|a, b| {
        let (ka, kb) = (a.priority(), b.priority());
        (ka.0, ka.1, ka.2, ka.3)
            .cmp(&(kb.0, kb.1, kb.2, kb.3))
            .then(ka.4.total_cmp(&kb.4))
    });
    actions
}
