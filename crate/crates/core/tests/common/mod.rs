#![allow(dead_code)]

use std::sync::Arc;

use harvest_core::chain::{admissible_actions, stencil};
use harvest_core::model::Dynamics;
use harvest_core::{
    build_model, Affine, BuiltinModel, ControlAction, Grid, ModelSpec, Rate, RateBounds, Regime,
};

pub const REGIMES: [Regime; 4] = [
    Regime::BoundedSeeding,
    Regime::BoundedBoth,
    Regime::BoundedHarvesting,
    Regime::Singular,
];

/// Two species with correlated noise:
/// `a = s² diag(x²) + c x1 x2 [[1, 1], [1, 1]]`.
#[derive(Debug)]
pub struct Correlated {
    pub s: f64,
    pub c: f64,
}

impl Dynamics for Correlated {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] * (2.0 - x[0] - 0.5 * x[1]);
        out[1] = x[1] * (1.5 - x[1] - 0.3 * x[0]);
    }

    fn diff_cov(&self, x: &[f64], out: &mut [f64]) {
        let cross = self.c * x[0] * x[1];
        out[0] = self.s * self.s * x[0] * x[0] + cross;
        out[1] = cross;
        out[2] = cross;
        out[3] = self.s * self.s * x[1] * x[1] + cross;
    }

    fn name(&self) -> &str {
        "correlated"
    }
}

pub fn logistic() -> ModelSpec {
    logistic_with(2.0)
}

pub fn logistic_with(sigma: f64) -> ModelSpec {
    build_model(
        BuiltinModel::Logistic {
            b1: 3.0,
            b2: 2.0,
            sigma,
        },
        vec![Affine::constant(0.5)],
        vec![Affine::constant(2.5)],
        0.05,
    )
    .unwrap()
}

pub fn competition() -> ModelSpec {
    build_model(
        BuiltinModel::Competition {
            b1: 3.0,
            b2: 2.0,
            a11: 2.0,
            a12: 1.5,
            a21: 2.0,
            a22: 2.0,
            sigma1: 3.0,
            sigma2: 4.0,
        },
        vec![Affine::constant(1.0), Affine::constant(1.5)],
        vec![Affine::constant(4.0), Affine::constant(3.0)],
        0.05,
    )
    .unwrap()
}

pub fn predator_prey() -> ModelSpec {
    build_model(
        BuiltinModel::PredatorPrey {
            b1: 2.0,
            b2: 1.0,
            b3: 1.0,
            a11: 1.2,
            a12: 1.0,
            a21: 4.0,
            a22: 2.0,
            sigma1: 1.6,
            sigma2: 1.8,
        },
        vec![Affine::constant(0.5), Affine::constant(0.75)],
        vec![Affine::constant(3.0), Affine::constant(4.0)],
        0.05,
    )
    .unwrap()
}

pub fn correlated() -> ModelSpec {
    ModelSpec::custom(
        Arc::new(Correlated { s: 1.2, c: 0.8 }),
        vec![Affine::constant(1.0), Affine::constant(1.0)],
        vec![Affine::constant(3.0), Affine::constant(3.0)],
        0.05,
    )
    .unwrap()
}

pub fn all_models() -> Vec<ModelSpec> {
    vec![logistic(), competition(), predator_prey(), correlated()]
}

pub fn bounds(regime: Regime, d: usize, lambda: f64, mu: f64) -> RateBounds {
    let seed = if regime.seeding_is_singular() {
        Rate::Unbounded
    } else {
        Rate::Finite(lambda)
    };
    let harvest = if regime.harvesting_is_singular() {
        Rate::Unbounded
    } else {
        Rate::Finite(mu)
    };
    RateBounds::uniform(d, seed, harvest).unwrap()
}

/// Checks one stencil against the local-consistency conditions: a proper
/// probability vector, exact conditional mean `vΔt`, and second moments
/// within `C·h·Δt` of `aΔt` with `C = 1 + 2 max|v_i|`. Jump stencils must
/// move exactly one lattice step with probability one.
pub fn check_stencil(
    model: &ModelSpec,
    grid: &Grid,
    node: usize,
    action: &ControlAction,
) -> Result<(), String> {
    let st = stencil(model, grid, node, action).map_err(|e| e.to_string())?;
    let d = grid.dim();
    let h = grid.h();
    let mut sum = 0.0;
    for &(_, p) in &st.entries {
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("probability {p} outside [0, 1]"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(format!("probabilities sum to {sum}"));
    }
    let x = grid.coords(node);
    let displacement = |target: usize| -> Vec<f64> {
        let y = grid.coords(target);
        (0..d).map(|i| y[i] - x[i]).collect()
    };

    let (seed, harvest) = match action {
        ControlAction::Diffusion { seed, harvest } => (seed.clone(), harvest.clone()),
        _ => {
            if st.dt != 0.0 || st.entries.len() != 1 {
                return Err("jump stencil must be deterministic and instantaneous".into());
            }
            let dx = displacement(st.entries[0].0);
            let (i, sign) = match *action {
                ControlAction::SeedJump(i) => (i, 1.0),
                ControlAction::HarvestJump(i) | ControlAction::Reflect(i) => (i, -1.0),
                ControlAction::Diffusion { .. } => unreachable!(),
            };
            for (j, v) in dx.iter().enumerate() {
                let want = if j == i { sign * h } else { 0.0 };
                if (v - want).abs() > 1e-12 {
                    return Err(format!("jump moved by {dx:?}"));
                }
            }
            return Ok(());
        }
    };

    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    model.drift(&x, &mut b);
    model.diff_cov(&x, &mut a);
    let v: Vec<f64> = (0..d).map(|i| b[i] + seed[i] - harvest[i]).collect();
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d * d];
    for &(target, p) in &st.entries {
        let dx = displacement(target);
        for i in 0..d {
            mean[i] += p * dx[i];
            for j in 0..d {
                second[i * d + j] += p * dx[i] * dx[j];
            }
        }
    }
    for i in 0..d {
        let want = v[i] * st.dt;
        if (mean[i] - want).abs() > 1e-12 {
            return Err(format!("mean {} vs v dt {want} in coordinate {i}", mean[i]));
        }
    }
    let c = 1.0 + 2.0 * v.iter().fold(0.0f64, |m, vi| m.max(vi.abs()));
    for i in 0..d {
        for j in 0..d {
            let cov = second[i * d + j] - mean[i] * mean[j];
            let err = (cov - a[i * d + j] * st.dt).abs();
            if err > c * h * st.dt + 1e-15 {
                return Err(format!(
                    "covariance ({i},{j}) off by {err:e}, allowed {:e}",
                    c * h * st.dt
                ));
            }
        }
    }
    Ok(())
}

/// A randomized stencil case. `node_u` and `action_u` in `[0, 1)` pick a
/// non-boundary node and one of its admissible actions.
#[derive(Debug, Clone, Copy)]
pub struct StencilCase {
    pub model: usize,
    pub regime: usize,
    pub node_u: f64,
    pub action_u: f64,
    pub levels: usize,
}

pub fn run_case(models: &[ModelSpec], case: StencilCase) -> Result<(), String> {
    let model = &models[case.model % models.len()];
    let regime = REGIMES[case.regime % 4];
    let d = model.dim();
    let h = if d == 1 { 0.01 } else { 0.1 };
    let grid = Grid::build(2.0, h, regime, d).map_err(|e| e.to_string())?;
    let bounds = bounds(regime, d, 0.5, 3.0);
    // Rejection-free pick of an interior node: draw a multi-index below max.
    let inner = grid.max_step();
    let mut flat = (case.node_u * (inner as f64).powi(d as i32)) as usize;
    let mut ks = vec![0usize; d];
    for k in ks.iter_mut() {
        *k = flat % inner;
        flat /= inner;
    }
    let node = grid.index_of(&ks);
    let actions = admissible_actions(&grid, node, regime, &bounds, case.levels);
    let action = &actions[((case.action_u * actions.len() as f64) as usize).min(actions.len() - 1)];
    check_stencil(model, &grid, node, action)
        .map_err(|e| format!("{} regime {regime} node {ks:?} {action}: {e}", model.name()))
}
