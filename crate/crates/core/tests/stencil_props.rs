mod common;

use common::{run_case, StencilCase};
use harvest_core::chain::admissible_actions;
use harvest_core::Grid;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stencils_are_locally_consistent(
        model in 0usize..4,
        regime in 0usize..4,
        node_u in 0.0f64..1.0,
        action_u in 0.0f64..1.0,
        levels in 2usize..5,
    ) {
        let models = common::all_models();
        let case = StencilCase { model, regime, node_u, action_u, levels };
        if let Err(e) = run_case(&models, case) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[test]
fn boundary_nodes_have_one_forced_action() {
    for regime in common::REGIMES {
        let grid = Grid::build(1.0, 0.1, regime, 2).unwrap();
        let bounds = common::bounds(regime, 2, 0.5, 3.0);
        for node in 0..grid.node_count() {
            let actions = admissible_actions(&grid, node, regime, &bounds, 2);
            if grid.saturated_species(node).is_some() {
                assert_eq!(actions.len(), 1, "{regime} node {node}");
                assert!(actions[0].is_jump());
            } else {
                assert!(actions.len() > 1 || !regime.seeding_is_singular());
            }
        }
    }
}

#[test]
fn every_interior_action_on_a_small_lattice_is_consistent() {
    let models = common::all_models();
    for model in &models {
        for regime in common::REGIMES {
            let grid = Grid::build(1.0, 0.1, regime, model.dim()).unwrap();
            let bounds = common::bounds(regime, model.dim(), 0.5, 3.0);
            for node in 0..grid.node_count() {
                if grid.saturated_species(node).is_some() {
                    continue;
                }
                for action in admissible_actions(&grid, node, regime, &bounds, 3) {
                    if let Err(e) = common::check_stencil(model, &grid, node, &action) {
                        panic!("{} {regime} node {node} {action}: {e}", model.name());
                    }
                }
            }
        }
    }
}
