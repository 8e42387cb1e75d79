//! Markov chain approximation of optimal harvesting and seeding problems for
//! stochastic population models.

pub mod analysis;
pub mod chain;
pub mod config;
pub mod io;
pub mod model;
pub mod simulate;
pub mod solver;

pub use chain::{ChainError, ControlAction, Grid, Stencil};
pub use model::{build_model, Affine, BuiltinModel, ModelError, ModelSpec, Rate, RateBounds, Regime};
pub use solver::{solve, solve_from, Solution, SolveError, SolveParams, SweepOrder, UpdateScheme};
