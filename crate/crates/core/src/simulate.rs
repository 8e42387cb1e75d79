//! Monte Carlo estimation of the discounted reward of a lattice policy.
//!
//! Paths follow the Euler–Maruyama scheme
//!
//! ```text
//! X <- X + (b(X) + c - r) dt + σ(X) √dt ξ
//! ```
//!
//! clamped to `[0, extent]^d`, with the rates `(c, r)` read at the nearest
//! lattice node. Jump actions are applied as an instantaneous loop of `±h`
//! moves before each step.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{ControlAction, Grid};
use crate::model::{check_origin_equilibrium, ModelSpec, Rate, RateBounds};
use crate::solver::Solution;

/// Eigenvalues of the diffusion matrix below this are clipped to zero.
const EIGEN_CLIP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("state became non-finite at t = {time} on path {path}")]
    NonFiniteState { path: usize, time: f64 },
    #[error("{failed} of {paths} paths became non-finite (first at t = {first_time})")]
    FailedPaths {
        failed: usize,
        paths: usize,
        first_time: f64,
    },
    #[error("policy has {got} actions but the lattice has {expected} nodes")]
    PolicySize { expected: usize, got: usize },
    #[error("model has {model} species but the lattice has {grid}")]
    Dimension { model: usize, grid: usize },
    #[error("sample state {0:?} is not a lattice node")]
    OffGrid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
}

impl SimConfig {
    /// `dt = h²`, a horizon at which `e^{-δT} < 10⁻³`, and 10⁴ paths.
    pub fn defaults_for(grid: &Grid, model: &ModelSpec) -> Self {
        SimConfig {
            dt: grid.h() * grid.h(),
            horizon: (1000.0f64).ln() / model.discount(),
            paths: 10_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.paths == 0 {
            return Err(SimError::InvalidConfig("paths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SimAction {
    Rates,
    HarvestJump(usize),
    SeedJump(usize),
}

/// Node-valued feedback policy prepared for simulation. Reflection nodes
/// take the action of their inward neighbour; the clamp at the extent plays
/// the role of the reflection.
#[derive(Debug, Clone)]
pub struct Policy {
    grid: Grid,
    actions: Vec<SimAction>,
    seed: Vec<f64>,
    harvest: Vec<f64>,
}

impl Policy {
    pub fn new(grid: &Grid, actions: &[ControlAction]) -> Result<Self, SimError> {
        let n = grid.node_count();
        let d = grid.dim();
        if actions.len() != n {
            return Err(SimError::PolicySize {
                expected: n,
                got: actions.len(),
            });
        }
        let mut out = Policy {
            grid: grid.clone(),
            actions: Vec::with_capacity(n),
            seed: vec![0.0; n * d],
            harvest: vec![0.0; n * d],
        };
        for node in 0..n {
            let mut src = node;
            while let ControlAction::Reflect(i) = actions[src] {
                src -= grid.stride(i);
            }
            let a = match &actions[src] {
                ControlAction::Diffusion { seed, harvest } => {
                    out.seed[node * d..(node + 1) * d].copy_from_slice(seed);
                    out.harvest[node * d..(node + 1) * d].copy_from_slice(harvest);
                    SimAction::Rates
                }
                ControlAction::HarvestJump(i) => SimAction::HarvestJump(*i),
                ControlAction::SeedJump(i) => SimAction::SeedJump(*i),
                ControlAction::Reflect(_) => unreachable!(),
            };
            out.actions.push(a);
        }
        Ok(out)
    }

    pub fn from_solution(solution: &Solution) -> Result<Self, SimError> {
        Self::new(&solution.grid, &solution.policy)
    }

    /// Harvest everything immediately: a harvest jump on the lowest
    /// non-extinct species at every node, idle at the origin.
    pub fn extinction(grid: &Grid) -> Self {
        let d = grid.dim();
        let mut ks = vec![0usize; d];
        let actions: Vec<ControlAction> = (0..grid.node_count())
            .map(|n| {
                grid.multi_index(n, &mut ks);
                match ks.iter().position(|&k| k > 0) {
                    Some(i) => ControlAction::HarvestJump(i),
                    None => ControlAction::idle(d),
                }
            })
            .collect();
        Self::new(grid, &actions).expect("sizes match")
    }

    /// Zero rates everywhere.
    pub fn idle(grid: &Grid) -> Self {
        Self::new(grid, &vec![ControlAction::idle(grid.dim()); grid.node_count()])
            .expect("sizes match")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub state: [f64; 2],
    pub action: i32,
    pub reward: f64,
}

/// Outcome of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub reward: f64,
    /// Final state inside `[0, h)^d`.
    pub extinct: bool,
    pub jump_cap_hit: bool,
}

/// Discounted reward of one path started at `x0`, with its random stream
/// selected by `path`.
pub fn simulate_path(
    model: &ModelSpec,
    policy: &Policy,
    x0: &[f64],
    cfg: &SimConfig,
    path: u64,
) -> Result<f64, SimError> {
    cfg.validate()?;
    check_dims(model, policy, x0)?;
    let absorbing = check_origin_equilibrium(model).passed();
    run_path(model, policy, x0, cfg, path, absorbing, None).map(|o| o.reward)
}

/// Like [`simulate_path`] but also records every `every`-th step (first two
/// species only).
pub fn trace_path(
    model: &ModelSpec,
    policy: &Policy,
    x0: &[f64],
    cfg: &SimConfig,
    path: u64,
    every: usize,
) -> Result<(f64, Vec<TraceRow>), SimError> {
    cfg.validate()?;
    check_dims(model, policy, x0)?;
    let absorbing = check_origin_equilibrium(model).passed();
    let mut rows = Vec::new();
    let o = run_path(model, policy, x0, cfg, path, absorbing, Some((every.max(1), &mut rows)))?;
    Ok((o.reward, rows))
}

fn check_dims(model: &ModelSpec, policy: &Policy, x0: &[f64]) -> Result<(), SimError> {
    let d = policy.grid.dim();
    if model.dim() != d {
        return Err(SimError::Dimension {
            model: model.dim(),
            grid: d,
        });
    }
    if x0.len() != d || x0.iter().any(|&x| !(x >= 0.0 && x <= policy.grid.extent())) {
        return Err(SimError::InvalidConfig(format!(
            "initial state {x0:?} outside [0, {}]^{d}",
            policy.grid.extent()
        )));
    }
    Ok(())
}

struct Workspace {
    b: Vec<f64>,
    a: Vec<f64>,
    sig: Vec<f64>,
    xi: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Workspace {
            b: vec![0.0; d],
            a: vec![0.0; d * d],
            sig: vec![0.0; d * d],
            xi: vec![0.0; d],
        }
    }
}

/// Symmetric PSD square root of the `d × d` matrix `a` into `out`.
pub fn psd_sqrt(a: &[f64], d: usize, out: &mut [f64]) {
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || a[i * d + j] == 0.0));
    if diagonal {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            out[i * d + i] = clip(a[i * d + i]).sqrt();
        }
        return;
    }
    let m = DMatrix::from_row_slice(d, d, a);
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|l| clip(l).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = root[(i, j)];
        }
    }
}

fn clip(l: f64) -> f64 {
    if l < EIGEN_CLIP {
        0.0
    } else {
        l
    }
}

fn run_path(
    model: &ModelSpec,
    policy: &Policy,
    x0: &[f64],
    cfg: &SimConfig,
    path: u64,
    absorbing: bool,
    mut trace: Option<(usize, &mut Vec<TraceRow>)>,
) -> Result<PathOutcome, SimError> {
    if policy.grid.dim() == 1 && trace.is_none() {
        let coeffs = |x: f64| {
            let (mut b, mut a) = ([0.0], [0.0]);
            model.drift(&[x], &mut b);
            model.diff_cov(&[x], &mut a);
            (b[0], a[0])
        };
        return run_path_1d(model, coeffs, policy, x0[0], cfg, path, absorbing);
    }
    let grid = &policy.grid;
    let d = grid.dim();
    let h = grid.h();
    let extent = grid.extent();
    let jump_cap = d * grid.max_step();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let step_discount = (-model.discount() * dt).exp();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path);
    let mut ws = Workspace::new(d);
    let mut x = x0.to_vec();
    let mut disc = 1.0;
    let mut reward = 0.0;
    let mut jump_cap_hit = false;

    for step in 0..steps {
        let mut node = grid.nearest(&x);
        let mut jumps = 0;
        loop {
            match policy.actions[node] {
                SimAction::HarvestJump(i) => {
                    reward += disc * model.price(i, &x) * h;
                    x[i] = remove_step(x[i], h);
                }
                SimAction::SeedJump(i) => {
                    reward -= disc * model.seed_cost(i, &x) * h;
                    x[i] = (x[i] + h).min(extent);
                }
                SimAction::Rates => break,
            }
            jumps += 1;
            node = grid.nearest(&x);
            if jumps >= jump_cap {
                jump_cap_hit = true;
                break;
            }
        }

        let seed = &policy.seed[node * d..(node + 1) * d];
        let harvest = &policy.harvest[node * d..(node + 1) * d];
        let active = seed.iter().chain(harvest).any(|&r| r > 0.0);
        if absorbing && !active && x.iter().all(|&v| v == 0.0) {
            break;
        }
        if let Some((every, rows)) = trace.as_mut() {
            if step % *every == 0 {
                rows.push(TraceRow {
                    time: step as f64 * dt,
                    state: [x[0], if d > 1 { x[1] } else { 0.0 }],
                    action: match policy.actions[node] {
                        SimAction::Rates => 0,
                        SimAction::HarvestJump(i) => i as i32 + 1,
                        SimAction::SeedJump(i) => -(i as i32 + 1),
                    },
                    reward,
                });
            }
        }

        if active {
            let mut rate = 0.0;
            for i in 0..d {
                rate += model.price(i, &x) * harvest[i] - model.seed_cost(i, &x) * seed[i];
            }
            reward += disc * rate * dt;
        }

        model.drift(&x, &mut ws.b);
        model.diff_cov(&x, &mut ws.a);
        if d == 1 {
            ws.sig[0] = clip(ws.a[0]).sqrt();
        } else {
            psd_sqrt(&ws.a, d, &mut ws.sig);
        }
        for v in ws.xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += ws.sig[i * d + j] * ws.xi[j];
            }
            let next = x[i] + (ws.b[i] + seed[i] - harvest[i]) * dt + noise * sqdt;
            if !next.is_finite() {
                return Err(SimError::NonFiniteState {
                    path: path as usize,
                    time: (step + 1) as f64 * dt,
                });
            }
            x[i] = next.clamp(0.0, extent);
        }
        disc *= step_discount;
    }

    Ok(PathOutcome {
        reward,
        extinct: x.iter().all(|&v| v < h),
        jump_cap_hit,
    })
}

/// Scalar specialisation of [`run_path`] for one species without tracing.
fn run_path_1d<F: Fn(f64) -> (f64, f64)>(
    model: &ModelSpec,
    coeffs: F,
    policy: &Policy,
    x0: f64,
    cfg: &SimConfig,
    path: u64,
    absorbing: bool,
) -> Result<PathOutcome, SimError> {
    let grid = &policy.grid;
    let h = grid.h();
    let inv_h = 1.0 / h;
    let max = grid.max_step();
    let extent = grid.extent();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let step_discount = (-model.discount() * dt).exp();
    let price = model.prices()[0];
    let cost = model.seed_costs()[0];
    let nearest = |x: f64| ((x * inv_h + 0.5) as usize).min(max);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path);
    let mut x = x0;
    let mut disc = 1.0;
    let mut reward = 0.0;
    let mut jump_cap_hit = false;

    for step in 0..steps {
        let mut node = nearest(x);
        let mut jumps = 0;
        loop {
            match policy.actions[node] {
                SimAction::HarvestJump(_) => {
                    reward += disc * price.eval(x) * h;
                    x = remove_step(x, h);
                }
                SimAction::SeedJump(_) => {
                    reward -= disc * cost.eval(x) * h;
                    x = (x + h).min(extent);
                }
                SimAction::Rates => break,
            }
            jumps += 1;
            node = nearest(x);
            if jumps >= max {
                jump_cap_hit = true;
                break;
            }
        }
        let c = policy.seed[node];
        let r = policy.harvest[node];
        if c != 0.0 || r != 0.0 {
            reward += disc * (price.eval(x) * r - cost.eval(x) * c) * dt;
        } else if absorbing && x == 0.0 {
            break;
        }
        let (b, a) = coeffs(x);
        let z: f64 = StandardNormal.sample(&mut rng);
        let next = x + (b + c - r) * dt + clip(a).sqrt() * sqdt * z;
        if !next.is_finite() {
            return Err(SimError::NonFiniteState {
                path: path as usize,
                time: (step + 1) as f64 * dt,
            });
        }
        x = next.clamp(0.0, extent);
        disc *= step_discount;
    }

    Ok(PathOutcome {
        reward,
        extinct: x < h,
        jump_cap_hit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
    /// Upper bound on the discounted reward that can accrue after the horizon.
    pub tail_bound: f64,
    pub extinction_fraction: f64,
    pub jump_cap_hits: usize,
}

/// `x - h` floored at zero. Rounding residue below `h·1e-9` is treated as
/// extinction, otherwise a population harvested down to the origin could
/// regrow from a remnant like `1e-17`.
#[inline]
fn remove_step(x: f64, h: f64) -> f64 {
    let y = x - h;
    if y < h * 1e-9 {
        0.0
    } else {
        y
    }
}

/// Compensated (Neumaier) sum.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `e^{-δT} (f_max · extent · d + Σ_i f_i · min(μ_i, max b_i⁺) / δ)`.
///
/// After the horizon at most the standing stock can be harvested at once,
/// plus a harvesting flow no faster than the maximal rate or the natural
/// growth; seeded mass costs more than it yields.
pub fn tail_bound(model: &ModelSpec, bounds: &RateBounds, grid: &Grid, horizon: f64) -> f64 {
    let d = grid.dim();
    let delta = model.discount();
    let f_max = |i: usize| {
        let p = &model.prices()[i];
        p.eval(0.0).max(p.eval(grid.extent())).max(0.0)
    };
    // growth scanned on a lattice four times finer than the grid
    let fine = 4 * grid.max_step();
    let step = grid.extent() / fine as f64;
    let mut growth = vec![0.0f64; d];
    let mut b = vec![0.0; d];
    let mut ks = vec![0usize; d];
    let mut x = vec![0.0; d];
    'scan: loop {
        for i in 0..d {
            x[i] = ks[i] as f64 * step;
        }
        model.drift(&x, &mut b);
        for i in 0..d {
            growth[i] = growth[i].max(b[i]);
        }
        for k in ks.iter_mut() {
            if *k < fine {
                *k += 1;
                continue 'scan;
            }
            *k = 0;
        }
        break;
    }
    let stock = (0..d).map(f_max).fold(0.0, f64::max) * grid.extent() * d as f64;
    let flow: f64 = (0..d)
        .map(|i| {
            let cap = match bounds.harvest.get(i) {
                Some(Rate::Finite(m)) => m.min(growth[i]),
                _ => growth[i],
            };
            f_max(i) * cap
        })
        .sum();
    (-delta * horizon).exp() * (stock + flow / delta)
}

/// Mean and standard error over `cfg.paths` independent paths.
pub fn estimate_performance(
    model: &ModelSpec,
    bounds: &RateBounds,
    policy: &Policy,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    cfg.validate()?;
    check_dims(model, policy, x0)?;
    let absorbing = check_origin_equilibrium(model).passed();
    let outcomes: Vec<Result<PathOutcome, SimError>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| run_path(model, policy, x0, cfg, p as u64, absorbing, None))
        .collect();
    let mut failed = 0;
    let mut first_time = f64::INFINITY;
    let mut ok = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(o) => ok.push(o),
            Err(SimError::NonFiniteState { time, .. }) => {
                failed += 1;
                first_time = first_time.min(time);
            }
            Err(e) => return Err(e),
        }
    }
    if failed > 0 {
        return Err(SimError::FailedPaths {
            failed,
            paths: cfg.paths,
            first_time,
        });
    }
    let n = ok.len() as f64;
    let mean = neumaier_sum(ok.iter().map(|o| o.reward)) / n;
    let stderr = if ok.len() > 1 {
        let var = neumaier_sum(ok.iter().map(|o| (o.reward - mean).powi(2))) / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(SimResult {
        mean,
        stderr,
        paths: ok.len(),
        tail_bound: tail_bound(model, bounds, &policy.grid, cfg.horizon),
        extinction_fraction: ok.iter().filter(|o| o.extinct).count() as f64 / n,
        jump_cap_hits: ok.iter().filter(|o| o.jump_cap_hit).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub state: Vec<f64>,
    pub value: f64,
    pub estimate: SimResult,
    pub difference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Compares `V^h` with Monte Carlo estimates of the solved policy at lattice
/// states. A state passes when `|V^h - MC| ≤ 3·stderr + slack · max(|V^h|, 1)`.
pub fn verify(
    model: &ModelSpec,
    solution: &Solution,
    states: &[Vec<f64>],
    cfg: &SimConfig,
    slack: f64,
) -> Result<VerifyReport, SimError> {
    let policy = Policy::from_solution(solution)?;
    let mut rows = Vec::with_capacity(states.len());
    for x in states {
        let node = solution
            .grid
            .node_at(x)
            .ok_or_else(|| SimError::OffGrid(x.clone()))?;
        let value = solution.values[node];
        let estimate = estimate_performance(model, &solution.bounds, &policy, x, cfg)?;
        let difference = (value - estimate.mean).abs();
        let tolerance = 3.0 * estimate.stderr + slack * value.abs().max(1.0);
        rows.push(VerifyRow {
            state: x.clone(),
            value,
            difference,
            tolerance,
            pass: difference <= tolerance,
            estimate,
        });
    }
    Ok(VerifyReport { rows })
}
