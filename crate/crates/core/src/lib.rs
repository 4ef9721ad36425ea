//! Activation-based early stopping.
//!
//! The engine reads per-checkpoint activation snapshots of two fixed input
//! populations (a held-out source batch and a handful of unlabelled target
//! inputs), summarises every hidden layer by four aggregated moments, and
//! searches for the layer, moment and time window where the target trajectory
//! anti-correlates most strongly with the source trajectory. The start of that
//! window is the suggested stopping checkpoint.
//!
//! Module map:
//!
//! - [`snapshot`]: ASNAP binary snapshots and JSON run manifests.
//! - [`moments`]: aggregated first/second moments of one activation batch.
//! - [`trajectory`]: time x layer x moment arrays for one population.
//! - [`divergence`]: windowed Pearson divergence, critical slice and stopping time.
//! - [`eval`]: extremum stopping on accuracy curves and gap-closure metrics.
//! - [`synth`]: planted trajectory scenarios and a small end-to-end toy trainer.
//!
//! With the default `parallel` feature the batch-shaped work (per-checkpoint
//! moment computation, per-slice window search, seed sweeps) runs on rayon;
//! without it every path runs sequentially and produces identical results.

pub mod divergence;
pub mod eval;
pub mod exec;
pub mod fsutil;
pub mod moments;
pub mod snapshot;
pub mod synth;
pub mod trajectory;

pub use divergence::{
    find_critical, pearson, stopping_time, stopping_time_with, DivergenceError,
    DivergenceOptions, DivergenceReport, DivergenceScore, IntervalUnit,
};
pub use eval::{evaluate, stop_at_extremum, AccuracyCurve, CurveKind, EvalError, EvalSummary};
pub use exec::Execution;
pub use moments::{compute_moments, derived_metrics, AggregatedMoments, DerivedMetrics, Moment};
pub use snapshot::{
    load_run, read_snapshot, write_snapshot, ActivationSnapshot, LayerActivations,
    PopulationKind, Run, RunManifest, SnapshotError,
};
pub use trajectory::{build_trajectory, trajectory_from_snapshots, TimeSeries, Trajectory, TrajectoryError};
