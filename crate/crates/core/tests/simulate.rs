mod common;

use harvest_core::simulate::{estimate_performance, simulate_path, verify, Policy, SimConfig};
use harvest_core::{solve, ControlAction, Grid, Regime, SolveParams, UpdateScheme};

fn cfg(paths: usize, seed: u64) -> SimConfig {
    SimConfig {
        dt: 1e-3,
        horizon: 40.0,
        paths,
        seed,
    }
}

#[test]
fn same_seed_same_estimate() {
    let model = common::logistic();
    let grid = Grid::build(4.0, 0.05, Regime::BoundedBoth, 1).unwrap();
    let bounds = common::bounds(Regime::BoundedBoth, 1, 0.5, 3.0);
    let sol = solve(&model, &bounds, &grid, &SolveParams::default()).unwrap();
    let policy = Policy::from_solution(&sol).unwrap();
    let a = estimate_performance(&model, &bounds, &policy, &[1.0], &cfg(64, 11)).unwrap();
    let b = estimate_performance(&model, &bounds, &policy, &[1.0], &cfg(64, 11)).unwrap();
    assert_eq!(a, b);
    let c = estimate_performance(&model, &bounds, &policy, &[1.0], &cfg(64, 12)).unwrap();
    assert_ne!(a.mean, c.mean);
    // Path streams do not depend on the number of paths requested.
    let single = simulate_path(&model, &policy, &[1.0], &cfg(64, 11), 5).unwrap();
    let again = simulate_path(&model, &policy, &[1.0], &cfg(1, 11), 5).unwrap();
    assert_eq!(single, again);
}

#[test]
fn standard_error_shrinks_like_root_n() {
    let model = common::logistic();
    let grid = Grid::build(4.0, 0.05, Regime::BoundedBoth, 1).unwrap();
    let bounds = common::bounds(Regime::BoundedBoth, 1, 0.5, 3.0);
    let sol = solve(&model, &bounds, &grid, &SolveParams::default()).unwrap();
    let policy = Policy::from_solution(&sol).unwrap();
    let small = estimate_performance(&model, &bounds, &policy, &[1.0], &cfg(400, 1)).unwrap();
    let large = estimate_performance(&model, &bounds, &policy, &[1.0], &cfg(1600, 2)).unwrap();
    let ratio = large.stderr / small.stderr;
    assert!((ratio - 0.5).abs() < 0.1, "stderr ratio {ratio}");
}

#[test]
fn extinction_policy_pays_the_stock_value() {
    for model in common::all_models() {
        let d = model.dim();
        let regime = Regime::BoundedSeeding;
        let grid = Grid::build(2.0, 0.1, regime, d).unwrap();
        let bounds = common::bounds(regime, d, 0.5, 3.0);
        let policy = Policy::extinction(&grid);
        for x in [vec![0.0; d], vec![0.5; d], vec![1.3; d], vec![2.0; d]] {
            let r = estimate_performance(&model, &bounds, &policy, &x, &cfg(4, 0)).unwrap();
            let want: f64 = (0..d).map(|i| model.price(i, &x) * x[i]).sum();
            assert!((r.mean - want).abs() < 1e-12, "{} at {x:?}: {}", model.name(), r.mean);
            assert_eq!(r.stderr, 0.0);
            assert_eq!(r.extinction_fraction, 1.0);
        }
    }
}

#[test]
fn solved_policy_matches_its_value() {
    let model = common::logistic();
    let regime = Regime::BoundedSeeding;
    let grid = Grid::build(4.0, 0.02, regime, 1).unwrap();
    let bounds = common::bounds(regime, 1, 0.5, 3.0);
    let params = SolveParams {
        update_scheme: UpdateScheme::PolicyIteration,
        ..SolveParams::default()
    };
    let sol = solve(&model, &bounds, &grid, &params).unwrap();
    let run = SimConfig {
        dt: 1e-3,
        horizon: 120.0,
        paths: 300,
        seed: 5,
    };
    let report = verify(&model, &sol, &[vec![0.5], vec![2.0]], &run, 0.05).unwrap();
    for row in &report.rows {
        assert!(row.pass, "{row:?}");
        assert!(row.estimate.tail_bound < 0.05 * row.value);
    }
}

#[test]
fn a_worse_policy_is_detected() {
    let model = common::logistic();
    let regime = Regime::BoundedSeeding;
    let grid = Grid::build(4.0, 0.05, regime, 1).unwrap();
    let bounds = common::bounds(regime, 1, 0.5, 3.0);
    let params = SolveParams {
        update_scheme: UpdateScheme::PolicyIteration,
        ..SolveParams::default()
    };
    let sol = solve(&model, &bounds, &grid, &params).unwrap();
    // Wait for the population to reach 3 before harvesting.
    let late: Vec<ControlAction> = (0..grid.node_count())
        .map(|k| {
            if grid.coordinate(k) >= 3.0 {
                ControlAction::HarvestJump(0)
            } else {
                ControlAction::idle(1)
            }
        })
        .collect();
    let run = SimConfig {
        dt: 1e-3,
        horizon: 120.0,
        paths: 300,
        seed: 9,
    };
    let policy = Policy::new(&grid, &late).unwrap();
    let x = [1.0];
    let late_est = estimate_performance(&model, &bounds, &policy, &x, &run).unwrap();
    let v = sol.value_at(&x).unwrap();
    assert!(
        late_est.mean + 3.0 * late_est.stderr + 0.05 * v < v,
        "late harvesting earns {} vs V {v}",
        late_est.mean
    );
    let idle = estimate_performance(&model, &bounds, &Policy::idle(&grid), &x, &run).unwrap();
    assert_eq!(idle.mean, 0.0);
}
