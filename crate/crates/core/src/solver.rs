//! Value/policy iteration on the controlled Markov chain.
//!
//! Each sweep replaces `V(x)` by the best branch value over the admissible
//! actions at `x`:
//!
//! ```text
//! jump:      V(target) + reward_jump
//! diffusion: e^{-δΔt} [ Σ_y p(x→y) V(y) + reward_rate · Δt ]
//! ```
//!
//! and records the maximiser as the policy. Iteration stops once the
//! sup-norm change between successive iterates drops below the tolerance.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{admissible_actions, stencil, ChainError, ControlAction, Grid, Stencil};
use crate::model::{
    check_diagonal_dominance, check_price_cost, AssumptionReport, ModelError, ModelSpec,
    RateBounds, Regime,
};

/// Relative tolerance under which two branch values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error("policy evaluation failed: {0}")]
    Singular(String),
    #[error("not converged after {} iterations (last change {:e})", .0.iterations, .0.residual_history.last().copied().unwrap_or(f64::NAN))]
    NotConverged(Box<Solution>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    Ascending,
    Descending,
    Alternating,
}

impl SweepOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepOrder::Ascending => "ascending",
            SweepOrder::Descending => "descending",
            SweepOrder::Alternating => "alternating",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScheme {
    /// In-place updates using values already refreshed in the same sweep.
    GaussSeidel,
    /// Every node updated from the previous iterate; parallel over nodes.
    Jacobi,
    /// Howard policy iteration: each policy is evaluated by a direct banded
    /// solve and then improved greedily. Reaches the exact fixed point.
    PolicyIteration,
}

impl UpdateScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpdateScheme::GaussSeidel => "gauss_seidel",
            UpdateScheme::Jacobi => "jacobi",
            UpdateScheme::PolicyIteration => "policy_iteration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveParams {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub sweep_order: SweepOrder,
    pub update_scheme: UpdateScheme,
    /// Rate levels per species and direction (2 = endpoints only).
    pub control_levels: usize,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            tolerance: 1e-7,
            max_iterations: 1_000_000,
            sweep_order: SweepOrder::Alternating,
            update_scheme: UpdateScheme::GaussSeidel,
            control_levels: 2,
        }
    }
}

impl SolveParams {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tolerance > 0.0) {
            return Err(SolveError::InvalidParams(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::InvalidParams(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.control_levels < 2 {
            return Err(SolveError::InvalidParams(
                "control_levels must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete value function and policy over the lattice.
#[derive(Debug, Clone)]
pub struct Solution {
    pub grid: Grid,
    pub regime: Regime,
    pub bounds: RateBounds,
    pub values: Vec<f64>,
    pub policy: Vec<ControlAction>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// `max_x |T V(x) - V(x)|` for the returned `V`.
    pub bellman_residual: f64,
    /// Most negative single-node change seen over all sweeps (0 if none).
    pub max_decrease: f64,
}

impl Solution {
    pub fn value_at(&self, x: &[f64]) -> Option<f64> {
        self.grid.node_at(x).map(|n| self.values[n])
    }

    pub fn action_at(&self, x: &[f64]) -> Option<&ControlAction> {
        self.grid.node_at(x).map(|n| &self.policy[n])
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "regime {} on {} nodes: {} iterations, converged = {}, last change {:.3e}, Bellman residual {:.3e}",
            self.regime,
            self.grid.node_count(),
            self.iterations,
            self.converged,
            self.final_residual(),
            self.bellman_residual
        )
    }
}

/// One action's precomputed contribution: `discount · Σ p V(target) + reward`.
#[derive(Debug, Clone, Copy)]
struct Branch {
    start: u32,
    end: u32,
    discount: f64,
    reward: f64,
    action: u32,
}

/// All stencils of a (model, bounds, grid) triple, flattened for fast sweeps.
#[derive(Debug, Clone)]
pub struct CompiledChain {
    grid: Grid,
    catalog: Vec<ControlAction>,
    node_offsets: Vec<usize>,
    branches: Vec<Branch>,
    targets: Vec<u32>,
    probs: Vec<f64>,
}

impl CompiledChain {
    pub fn compile(
        model: &ModelSpec,
        bounds: &RateBounds,
        grid: &Grid,
        control_levels: usize,
    ) -> Result<Self, SolveError> {
        let regime = bounds.regime()?;
        let delta = model.discount();
        let mut catalog: Vec<ControlAction> = Vec::new();
        let mut node_offsets = Vec::with_capacity(grid.node_count() + 1);
        let mut branches = Vec::new();
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        node_offsets.push(0);
        for node in 0..grid.node_count() {
            for action in admissible_actions(grid, node, regime, bounds, control_levels) {
                let st: Stencil = stencil(model, grid, node, &action)?;
                let id = match catalog.iter().position(|a| *a == action) {
                    Some(id) => id,
                    None => {
                        catalog.push(action);
                        catalog.len() - 1
                    }
                };
                let start = targets.len() as u32;
                for &(t, p) in &st.entries {
                    targets.push(t as u32);
                    probs.push(p);
                }
                let (discount, reward) = if st.dt > 0.0 {
                    let disc = (-delta * st.dt).exp();
                    (disc, disc * st.reward_rate * st.dt)
                } else {
                    (1.0, st.reward_jump)
                };
                branches.push(Branch {
                    start,
                    end: targets.len() as u32,
                    discount,
                    reward,
                    action: id as u32,
                });
            }
            node_offsets.push(branches.len());
        }
        Ok(CompiledChain {
            grid: grid.clone(),
            catalog,
            node_offsets,
            branches,
            targets,
            probs,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    fn branch_value(&self, b: &Branch, v: &[f64]) -> f64 {
        let (s, e) = (b.start as usize, b.end as usize);
        let mut acc = 0.0;
        for k in s..e {
            acc += self.probs[k] * v[self.targets[k] as usize];
        }
        b.discount * acc + b.reward
    }

    /// Best value at `node` and the catalog index of the tie-broken maximiser.
    #[inline]
    fn best(&self, node: usize, v: &[f64], scratch: &mut Vec<f64>) -> (f64, u32) {
        let range = &self.branches[self.node_offsets[node]..self.node_offsets[node + 1]];
        scratch.clear();
        let mut best = f64::NEG_INFINITY;
        for b in range {
            let val = self.branch_value(b, v);
            scratch.push(val);
            if val > best {
                best = val;
            }
        }
        let cut = best - TIE_TOLERANCE * best.abs().max(1.0);
        let pick = scratch.iter().position(|&val| val >= cut).unwrap_or(0);
        (best, range[pick].action)
    }

    /// One application of the Bellman operator (Jacobi form).
    pub fn apply(&self, v: &[f64]) -> (Vec<f64>, Vec<u32>) {
        (0..self.grid.node_count())
            .into_par_iter()
            .map_init(Vec::new, |scratch, n| self.best(n, v, scratch))
            .unzip()
    }

    pub fn action(&self, id: u32) -> &ControlAction {
        &self.catalog[id as usize]
    }
}

/// Value of taking `action` at `node` against the current values.
pub fn bellman_value(
    model: &ModelSpec,
    grid: &Grid,
    values: &[f64],
    node: usize,
    action: &ControlAction,
) -> Result<f64, ChainError> {
    let st = stencil(model, grid, node, action)?;
    Ok(stencil_value(&st, values, model.discount()))
}

/// Bellman branch value for a prebuilt stencil.
pub fn stencil_value(st: &Stencil, values: &[f64], delta: f64) -> f64 {
    let expected: f64 = st.entries.iter().map(|&(t, p)| p * values[t]).sum();
    if st.dt > 0.0 {
        (-delta * st.dt).exp() * (expected + st.reward_rate * st.dt)
    } else {
        expected + st.reward_jump
    }
}

/// Sup-norm distance between two iterates.
pub fn residual(prev: &[f64], next: &[f64]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Starting values: `Σ f_i(x) x_i` (harvest everything now) where singular
/// harvesting is available, zero otherwise.
pub fn initial_values(model: &ModelSpec, grid: &Grid, regime: Regime) -> Vec<f64> {
    if !regime.harvesting_is_singular() {
        return vec![0.0; grid.node_count()];
    }
    let d = grid.dim();
    let mut x = vec![0.0; d];
    (0..grid.node_count())
        .map(|n| {
            grid.coords_into(n, &mut x);
            (0..d).map(|i| model.price(i, &x) * x[i]).sum()
        })
        .collect()
}

/// Runs the assumption checks a solve depends on and returns their reports.
pub fn assumption_reports(model: &ModelSpec, grid: &Grid) -> Vec<AssumptionReport> {
    vec![
        check_price_cost(model, grid.nodes(), grid.h()),
        check_diagonal_dominance(model, grid.nodes()),
    ]
}

fn preflight(
    model: &ModelSpec,
    bounds: &RateBounds,
    grid: &Grid,
    params: &SolveParams,
) -> Result<Regime, SolveError> {
    params.validate()?;
    let regime = bounds.regime()?;
    if model.dim() != grid.dim() || bounds.dim() != grid.dim() {
        return Err(ModelError::DimensionMismatch {
            what: "grid/bounds",
            expected: model.dim(),
            got: grid.dim().max(bounds.dim()),
        }
        .into());
    }
    if regime == Regime::BoundedSeeding && !model.price_is_constant() {
        return Err(SolveError::AssumptionViolation(
            "bounded seeding with singular harvesting requires constant prices".into(),
        ));
    }
    if regime == Regime::BoundedHarvesting && !model.cost_is_constant() {
        return Err(SolveError::AssumptionViolation(
            "singular seeding with bounded harvesting requires constant seeding costs".into(),
        ));
    }
    for report in assumption_reports(model, grid) {
        if !report.passed() {
            return Err(SolveError::AssumptionViolation(report.to_string()));
        }
    }
    Ok(regime)
}

/// Solves from the default starting values.
pub fn solve(
    model: &ModelSpec,
    bounds: &RateBounds,
    grid: &Grid,
    params: &SolveParams,
) -> Result<Solution, SolveError> {
    let regime = bounds.regime()?;
    solve_from(model, bounds, grid, params, initial_values(model, grid, regime))
}

/// Solves starting from the supplied values (warm start).
pub fn solve_from(
    model: &ModelSpec,
    bounds: &RateBounds,
    grid: &Grid,
    params: &SolveParams,
    initial: Vec<f64>,
) -> Result<Solution, SolveError> {
    let regime = preflight(model, bounds, grid, params)?;
    if initial.len() != grid.node_count() {
        return Err(SolveError::InvalidParams(format!(
            "initial values have {} entries, lattice has {} nodes",
            initial.len(),
            grid.node_count()
        )));
    }
    let chain = CompiledChain::compile(model, bounds, grid, params.control_levels)?;
    let solution = match params.update_scheme {
        UpdateScheme::PolicyIteration => policy_iteration(&chain, regime, bounds, params, initial)?,
        _ => iterate(&chain, regime, bounds, params, initial),
    };
    Ok(solution).and_then(|s| {
        if s.converged {
            Ok(s)
        } else {
            Err(SolveError::NotConverged(Box::new(s)))
        }
    })
}

fn iterate(
    chain: &CompiledChain,
    regime: Regime,
    bounds: &RateBounds,
    params: &SolveParams,
    mut values: Vec<f64>,
) -> Solution {
    let n = chain.grid.node_count();
    let mut policy = vec![0u32; n];
    let mut history = Vec::new();
    let mut max_decrease = 0.0f64;
    let mut converged = false;
    let mut scratch = Vec::new();

    for iter in 0..params.max_iterations {
        let mut change = 0.0f64;
        match params.update_scheme {
            UpdateScheme::GaussSeidel => {
                let descending = match params.sweep_order {
                    SweepOrder::Ascending => false,
                    SweepOrder::Descending => true,
                    SweepOrder::Alternating => iter % 2 == 1,
                };
                let mut visit = |node: usize| {
                    let (best, id) = chain.best(node, &values, &mut scratch);
                    let diff = best - values[node];
                    change = change.max(diff.abs());
                    max_decrease = max_decrease.min(diff);
                    values[node] = best;
                    policy[node] = id;
                };
                if descending {
                    (0..n).rev().for_each(&mut visit);
                } else {
                    (0..n).for_each(&mut visit);
                }
            }
            UpdateScheme::Jacobi | UpdateScheme::PolicyIteration => {
                let (next, ids) = chain.apply(&values);
                for (old, new) in values.iter().zip(&next) {
                    let diff = new - old;
                    change = change.max(diff.abs());
                    max_decrease = max_decrease.min(diff);
                }
                values = next;
                policy = ids;
            }
        }
        history.push(change);
        if change < params.tolerance {
            converged = true;
            break;
        }
    }

    let (applied, _) = chain.apply(&values);
    let bellman_residual = residual(&values, &applied);
    Solution {
        grid: chain.grid.clone(),
        regime,
        bounds: bounds.clone(),
        policy: policy.iter().map(|&id| chain.action(id).clone()).collect(),
        values,
        iterations: history.len(),
        residual_history: history,
        converged,
        bellman_residual,
        max_decrease,
    }
}

/// Largest banded matrix (stored entries) policy evaluation will allocate.
const BANDED_ENTRY_CAP: usize = 40_000_000;

/// Row-major band storage of an `n × n` matrix with half-bandwidth `bw`.
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, bw: usize) -> Self {
        Banded {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * (2 * self.bw + 1) + j + self.bw - i]
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (2 * self.bw + 1) + j + self.bw - i]
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// In-place LU without pivoting; the rows are diagonally dominant.
    fn factor(&mut self) -> Result<(), SolveError> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.get(k, k);
            if !(pivot.abs() > 1e-300) {
                return Err(SolveError::Singular(format!(
                    "zero pivot at node {k} (the policy contains a cycle of jumps)"
                )));
            }
            let hi = (k + bw).min(n - 1);
            for i in (k + 1)..=hi {
                let l = self.get(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                *self.at(i, k) = l;
                for j in (k + 1)..=hi {
                    let u = self.get(k, j);
                    if u != 0.0 {
                        *self.at(i, j) -= l * u;
                    }
                }
            }
        }
        Ok(())
    }

    fn solve_factored(&self, rhs: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut acc = rhs[i];
            for j in lo..i {
                acc -= self.get(i, j) * rhs[j];
            }
            rhs[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut acc = rhs[i];
            for j in (i + 1)..=hi {
                acc -= self.get(i, j) * rhs[j];
            }
            rhs[i] = acc / self.get(i, i);
        }
    }
}

impl CompiledChain {
    fn branch_range(&self, node: usize) -> std::ops::Range<usize> {
        self.node_offsets[node]..self.node_offsets[node + 1]
    }

    /// Index of the tie-broken greedy branch at `node`.
    fn greedy_branch(&self, node: usize, v: &[f64], keep: Option<usize>) -> usize {
        let range = self.branch_range(node);
        let vals: Vec<f64> = range
            .clone()
            .map(|b| self.branch_value(&self.branches[b], v))
            .collect();
        let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cut = best - TIE_TOLERANCE * best.abs().max(1.0);
        if let Some(k) = keep {
            if vals[k - range.start] >= cut {
                return k;
            }
        }
        range.start + vals.iter().position(|&x| x >= cut).unwrap_or(0)
    }

    /// Exact values of the stationary policy choosing `branch[node]`.
    fn evaluate(&self, branch: &[usize]) -> Result<Vec<f64>, SolveError> {
        let n = branch.len();
        let mut bw = 0;
        for (node, &b) in branch.iter().enumerate() {
            let br = &self.branches[b];
            for k in br.start as usize..br.end as usize {
                bw = bw.max((self.targets[k] as usize).abs_diff(node));
            }
        }
        if n * (2 * bw + 1) > BANDED_ENTRY_CAP {
            return Err(SolveError::InvalidParams(format!(
                "policy iteration needs a {n} x {n} band of half-width {bw}; use gauss_seidel"
            )));
        }
        let mut a = Banded::zeros(n, bw);
        let mut rhs = vec![0.0; n];
        for (node, &b) in branch.iter().enumerate() {
            let br = &self.branches[b];
            *a.at(node, node) += 1.0;
            for k in br.start as usize..br.end as usize {
                *a.at(node, self.targets[k] as usize) -= br.discount * self.probs[k];
            }
            rhs[node] = br.reward;
        }
        let original = Banded {
            n,
            bw,
            data: a.data.clone(),
        };
        a.factor()?;
        let mut v = rhs.clone();
        a.solve_factored(&mut v);
        // one step of iterative refinement
        let av = original.mul(&v);
        let mut r: Vec<f64> = rhs.iter().zip(&av).map(|(b, x)| b - x).collect();
        a.solve_factored(&mut r);
        for (vi, ri) in v.iter_mut().zip(&r) {
            *vi += ri;
        }
        Ok(v)
    }
}

fn policy_iteration(
    chain: &CompiledChain,
    regime: Regime,
    bounds: &RateBounds,
    params: &SolveParams,
    mut values: Vec<f64>,
) -> Result<Solution, SolveError> {
    let n = chain.grid.node_count();
    let mut branch: Vec<usize> = (0..n).map(|node| chain.greedy_branch(node, &values, None)).collect();
    let mut history = Vec::new();
    let mut max_decrease = 0.0f64;
    let mut converged = false;
    for _ in 0..params.max_iterations {
        let next = chain.evaluate(&branch)?;
        let mut change = 0.0f64;
        for (old, new) in values.iter().zip(&next) {
            let diff = new - old;
            change = change.max(diff.abs());
            max_decrease = max_decrease.min(diff);
        }
        values = next;
        history.push(change);
        let mut stable = true;
        for (node, b) in branch.iter_mut().enumerate() {
            let pick = chain.greedy_branch(node, &values, Some(*b));
            if pick != *b {
                *b = pick;
                stable = false;
            }
        }
        if stable {
            converged = true;
            break;
        }
    }
    let (applied, ids) = chain.apply(&values);
    Ok(Solution {
        grid: chain.grid.clone(),
        regime,
        bounds: bounds.clone(),
        policy: ids.iter().map(|&id| chain.action(id).clone()).collect(),
        bellman_residual: residual(&values, &applied),
        values,
        iterations: history.len(),
        residual_history: history,
        converged,
        max_decrease,
    })
}
