//! Ground-truth fixtures for the engine: planted trajectory scenarios and a
//! toy trainer that produces real snapshots end to end.

pub mod rundir;
pub mod scenario;
pub mod toy;

pub use rundir::{snapshot_file_name, RunDir, MANIFEST_FILE, TARGET_CURVE_FILE, VALID_CURVE_FILE};
pub use scenario::{generate_scenario, mirror_after, realise_moments, GroundTruth, Scenario, ScenarioError, ScenarioSpec};
pub use toy::{acceptance_spec, toy_train, ACCEPTANCE_SHIFT, Mlp, Nonlinearity, ToyError, ToyRun, ToyTrainSpec};
