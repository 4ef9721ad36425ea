//! Per-population trajectories: one L x 4 moment matrix per checkpoint.

use std::io::Write;

use thiserror::Error;

use crate::exec::Execution;
use crate::moments::{compute_moments, Moment};
use crate::snapshot::{ActivationSnapshot, Run, SnapshotError};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("{what} index {index} out of range (have {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("writing trajectory csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Moments of every layer at every checkpoint for one input population.
///
/// Values are stored dense, time-major then layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    population: String,
    checkpoints: Vec<u64>,
    n_layers: usize,
    values: Vec<[f64; 4]>,
}

/// A single (layer, moment) slice through time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub checkpoints: Vec<u64>,
    pub values: Vec<f64>,
}

impl Trajectory {
    /// `values[t * n_layers + l]` holds the moments of layer `l` at
    /// checkpoint position `t`.
    pub fn new(
        population: impl Into<String>,
        checkpoints: Vec<u64>,
        n_layers: usize,
        values: Vec<[f64; 4]>,
    ) -> Result<Self, TrajectoryError> {
        if checkpoints.is_empty() || n_layers == 0 {
            return Err(TrajectoryError::Invalid(format!(
                "need at least one checkpoint and one layer (got {} x {n_layers})",
                checkpoints.len()
            )));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrajectoryError::Invalid("checkpoints must be strictly increasing".into()));
        }
        if values.len() != checkpoints.len() * n_layers {
            return Err(TrajectoryError::Invalid(format!(
                "expected {} moment rows, got {}",
                checkpoints.len() * n_layers,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|row| row.iter().any(|v| !v.is_finite())) {
            return Err(TrajectoryError::Invalid(format!(
                "non-finite moment at checkpoint {}, layer {}",
                checkpoints[i / n_layers],
                i % n_layers
            )));
        }
        Ok(Trajectory {
            population: population.into(),
            checkpoints,
            n_layers,
            values,
        })
    }

    pub fn population(&self) -> &str {
        &self.population
    }

    pub fn checkpoints(&self) -> &[u64] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Moment row of `layer` at checkpoint position `t`.
    pub fn at(&self, t: usize, layer: usize) -> [f64; 4] {
        self.values[t * self.n_layers + layer]
    }

    pub fn slice(&self, layer: usize, moment: Moment) -> Result<TimeSeries, TrajectoryError> {
        Ok(TimeSeries {
            checkpoints: self.checkpoints.clone(),
            values: self.slice_values(layer, moment)?,
        })
    }

    /// Like [`slice`](Self::slice) without the checkpoint axis.
    pub fn slice_values(&self, layer: usize, moment: Moment) -> Result<Vec<f64>, TrajectoryError> {
        if layer >= self.n_layers {
            return Err(TrajectoryError::OutOfRange {
                what: "layer",
                index: layer,
                len: self.n_layers,
            });
        }
        let m = moment.index();
        Ok(self
            .values
            .iter()
            .skip(layer)
            .step_by(self.n_layers)
            .map(|row| row[m])
            .collect())
    }

    /// Applies `f` to every value of one slice.
    pub fn map_slice(&mut self, layer: usize, moment: Moment, f: impl Fn(f64) -> f64) -> Result<(), TrajectoryError> {
        if layer >= self.n_layers {
            return Err(TrajectoryError::OutOfRange {
                what: "layer",
                index: layer,
                len: self.n_layers,
            });
        }
        let m = moment.index();
        for row in self.values.iter_mut().skip(layer).step_by(self.n_layers) {
            row[m] = f(row[m]);
        }
        Ok(())
    }

    /// The first `len` checkpoints.
    pub fn prefix(&self, len: usize) -> Result<Trajectory, TrajectoryError> {
        if len == 0 || len > self.len() {
            return Err(TrajectoryError::OutOfRange {
                what: "prefix length",
                index: len,
                len: self.len(),
            });
        }
        Ok(Trajectory {
            population: self.population.clone(),
            checkpoints: self.checkpoints[..len].to_vec(),
            n_layers: self.n_layers,
            values: self.values[..len * self.n_layers].to_vec(),
        })
    }

    /// CSV with header `checkpoint,layer,m1,m2,m3,m4`, one row per
    /// (checkpoint, layer). Floats use the shortest representation that
    /// parses back to the same f64.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["checkpoint", "layer", "m1", "m2", "m3", "m4"])?;
        for (t, &c) in self.checkpoints.iter().enumerate() {
            for l in 0..self.n_layers {
                let row = self.at(t, l);
                w.write_record([
                    c.to_string(),
                    l.to_string(),
                    fmt_f64(row[0]),
                    fmt_f64(row[1]),
                    fmt_f64(row[2]),
                    fmt_f64(row[3]),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Shortest round-trip decimal form of an f64 (at most 17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x}")
}

/// Builds a trajectory from in-memory snapshots ordered by checkpoint.
pub fn trajectory_from_snapshots(
    population: &str,
    snapshots: &[ActivationSnapshot],
    exec: Execution,
) -> Result<Trajectory, TrajectoryError> {
    let n_layers = snapshots.first().map_or(0, |s| s.layers.len());
    if let Some(s) = snapshots.iter().find(|s| s.layers.len() != n_layers) {
        return Err(TrajectoryError::Invalid(format!(
            "checkpoint {} has {} layers, expected {n_layers}",
            s.checkpoint,
            s.layers.len()
        )));
    }
    let rows = exec.map(snapshots, |s| {
        s.layers.iter().map(|l| compute_moments(l).as_array()).collect::<Vec<_>>()
    });
    Trajectory::new(
        population,
        snapshots.iter().map(|s| s.checkpoint).collect(),
        n_layers,
        rows.into_iter().flatten().collect(),
    )
}

/// Computes the trajectory of `population` over every checkpoint of `run`.
/// Checkpoints are processed independently, so the result does not depend on
/// the schedule.
pub fn build_trajectory(run: &Run, population: &str, exec: Execution) -> Result<Trajectory, TrajectoryError> {
    if !run.has_population(population) {
        return Err(SnapshotError::UnknownPopulation(population.to_string()).into());
    }
    let n_layers = run.n_layers();
    let per_checkpoint: Vec<Result<Vec<[f64; 4]>, SnapshotError>> = exec.map(run.checkpoints(), |&c| {
        let snap = run.snapshot(population, c)?;
        Ok(snap.layers.iter().map(|l| compute_moments(l).as_array()).collect())
    });
    let mut values = Vec::with_capacity(run.checkpoints().len() * n_layers);
    for rows in per_checkpoint {
        values.extend(rows?);
    }
    Trajectory::new(population, run.checkpoints().to_vec(), n_layers, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj() -> Trajectory {
        // 3 checkpoints, 2 layers; m1 of layer 0 is the line 2t + 1.
        let values = (0..3)
            .flat_map(|t| {
                let t = t as f64;
                [[2.0 * t + 1.0, 1.0, 2.0, 3.0], [5.0, 5.0, 5.0, 5.0]]
            })
            .collect();
        Trajectory::new("target", vec![0, 10, 20], 2, values).unwrap()
    }

    #[test]
    fn slices() {
        let t = traj();
        let s = t.slice(0, Moment::M1).unwrap();
        assert_eq!(s.checkpoints, vec![0, 10, 20]);
        assert_eq!(s.values, vec![1.0, 3.0, 5.0]);
        assert_eq!(t.slice_values(1, Moment::M4).unwrap(), vec![5.0; 3]);
        assert!(matches!(
            t.slice(2, Moment::M1),
            Err(TrajectoryError::OutOfRange { what: "layer", index: 2, len: 2 })
        ));
    }

    #[test]
    fn prefix_matches() {
        let t = traj();
        let p = t.prefix(2).unwrap();
        assert_eq!(p.checkpoints(), &[0, 10]);
        assert_eq!(p.slice_values(0, Moment::M1).unwrap(), vec![1.0, 3.0]);
        assert!(t.prefix(0).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Trajectory::new("x", vec![], 1, vec![]).is_err());
        assert!(Trajectory::new("x", vec![1, 1], 1, vec![[0.0; 4]; 2]).is_err());
        assert!(Trajectory::new("x", vec![1], 1, vec![[f64::NAN, 0.0, 0.0, 0.0]]).is_err());
        assert!(Trajectory::new("x", vec![1], 2, vec![[0.0; 4]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = traj().to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "checkpoint,layer,m1,m2,m3,m4");
        assert_eq!(lines[1], "0,0,1,1,2,3");
        assert_eq!(lines[2], "0,1,5,5,5,5");
        assert_eq!(lines.len(), 7);
        assert_eq!(fmt_f64(0.1 + 0.2), "0.30000000000000004");
        assert_eq!(fmt_f64(-0.0), "0");
    }
}
