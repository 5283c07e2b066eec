//! Figure datasets: a registry of named scenarios and a parallel grid runner.

mod grid;
mod result;
mod scenarios;

pub use grid::{grid_run, with_pool, AxisScale, AxisSpec, GridOptions, GridPoint};
pub use result::{config_hash, read_meta, Cell, PointFailure, ScenarioMeta, ScenarioResult};
pub use scenarios::{
    apply_overrides, beta_map_point, bystander_scenario, coupling_map_point, orientation_point,
    registry, run_scenario, run_spec, scenario, scenario_names, RunContext, ScenarioKind,
    ScenarioSpec, SweepSpec, TmMode, Variant, BYSTANDER_PHI, BYSTANDER_THETA,
};
