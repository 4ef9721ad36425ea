//! Planted divergence scenarios.
//!
//! Every (layer, moment) slice of the source trajectory drifts linearly. The
//! target copies the source everywhere except the planted slice, where it
//! follows the source up to and including the breakpoint and afterwards runs
//! the source's post-breakpoint segment backwards in time (same values,
//! negated slope). That reflection makes `(breakpoint, last]` the unique
//! best window of the planted slice: the target point at the breakpoint sits
//! below every later target value while the source is rising, so any window
//! reaching back past the breakpoint loses correlation faster than it gains
//! length. A continuous kink (target turning around at the breakpoint) would
//! not work: the kink point is collinear with the falling arm, and the best
//! window would start one or more checkpoints early.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::path::Path;

use crate::eval::{AccuracyCurve, CurveKind};
use crate::moments::Moment;
use crate::snapshot::{
    ActivationSnapshot, LayerActivations, PopulationKind, RunManifest, SnapshotError, SOURCE_VALID_TAG, TARGET_TAG,
};
use crate::synth::rundir::{RunDir, TARGET_CURVE_FILE, VALID_CURVE_FILE};
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub layers: usize,
    /// Number of checkpoints; the axis is `0..checkpoints`.
    pub checkpoints: usize,
    pub planted_layer: usize,
    pub planted_moment: Moment,
    /// Last checkpoint where the planted target slice still follows the source.
    pub breakpoint: u64,
    /// Noise deviation as a fraction of each slice's |slope|, added
    /// independently to both populations.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Range of |slope| per slice; the sign is drawn uniformly.
    pub slope_range: (f64, f64),
    pub intercept_range: (f64, f64),
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            layers: 4,
            checkpoints: 11,
            planted_layer: 1,
            planted_moment: Moment::M3,
            breakpoint: 5,
            noise_sigma: 0.0,
            seed: 0,
            slope_range: (0.5, 2.0),
            intercept_range: (-5.0, 5.0),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.checkpoints < 4 {
            return bad(format!("need at least 4 checkpoints, got {}", self.checkpoints));
        }
        if self.planted_layer >= self.layers {
            return bad(format!(
                "planted layer {} out of range (layers = {})",
                self.planted_layer, self.layers
            ));
        }
        // Strictly inside the axis, and leaving a window of at least two
        // points after the breakpoint.
        let last = self.checkpoints as u64 - 1;
        if self.breakpoint < 1 || self.breakpoint + 2 > last {
            return bad(format!(
                "breakpoint {} must lie in 1..={} for {} checkpoints",
                self.breakpoint,
                last - 2,
                self.checkpoints
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let (lo, hi) = self.slope_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("slope range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let (lo, hi) = self.intercept_range;
        if !(hi >= lo && lo.is_finite() && hi.is_finite()) {
            return bad(format!("intercept range ({lo}, {hi}) is empty"));
        }
        Ok(())
    }
}

/// What the generator planted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub layer: usize,
    pub moment: Moment,
    pub breakpoint: u64,
    /// Last checkpoint; the source rises throughout, so validation peaks there.
    pub t_valid_star: u64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub source: Trajectory,
    pub target: Trajectory,
    pub truth: GroundTruth,
}

/// Target series for a planted slice: `source` up to and including position
/// `breakpoint`, then the source's remaining segment in reverse order.
pub fn mirror_after(source: &[f64], breakpoint: usize) -> Vec<f64> {
    let mut out = source.to_vec();
    out[breakpoint + 1..].reverse();
    out
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_len = spec.checkpoints;
    let n_layers = spec.layers;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut source = vec![[0.0; 4]; t_len * n_layers];
    let mut target = vec![[0.0; 4]; t_len * n_layers];
    for layer in 0..n_layers {
        for moment in Moment::ALL {
            let magnitude = rng.random_range(spec.slope_range.0..=spec.slope_range.1);
            let slope = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            let intercept = rng.random_range(spec.intercept_range.0..=spec.intercept_range.1);
            let base: Vec<f64> = (0..t_len).map(|t| intercept + slope * t as f64).collect();
            let target_base = if layer == spec.planted_layer && moment == spec.planted_moment {
                mirror_after(&base, spec.breakpoint as usize)
            } else {
                base.clone()
            };
            let sigma = spec.noise_sigma * magnitude;
            let m = moment.index();
            for t in 0..t_len {
                let (ns, nt) = if sigma > 0.0 {
                    (
                        sigma * std_normal.sample(&mut rng),
                        sigma * std_normal.sample(&mut rng),
                    )
                } else {
                    (0.0, 0.0)
                };
                source[t * n_layers + layer][m] = base[t] + ns;
                target[t * n_layers + layer][m] = target_base[t] + nt;
            }
        }
    }

    let checkpoints: Vec<u64> = (0..t_len as u64).collect();
    let truth = GroundTruth {
        layer: spec.planted_layer,
        moment: spec.planted_moment,
        breakpoint: spec.breakpoint,
        t_valid_star: t_len as u64 - 1,
    };
    Ok(Scenario {
        spec: spec.clone(),
        source: Trajectory::new("source_valid", checkpoints.clone(), n_layers, source)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?,
        target: Trajectory::new("target", checkpoints, n_layers, target)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?,
        truth,
    })
}

/// Features per layer in realised snapshots.
pub const REALISED_FEATURES: usize = 4;
/// Examples per realised snapshot.
pub const REALISED_EXAMPLES: usize = 2;

/// Lower end of the unit-width interval each moment is mapped into before
/// realisation. Any point of that box is attainable by [`realise_moments`].
const REALISED_BOX: [f64; 4] = [1.0, 3.0, 10.0, 0.0];

/// A length-4 vector with the given sum and sum of squares, which must
/// satisfy `sum_sq >= sum^2 / 4`.
fn with_sum_and_square(sum: f64, sum_sq: f64) -> [f64; 4] {
    let base = sum / 4.0;
    let r = (sum_sq - sum * sum / 4.0).max(0.0).sqrt();
    [base + 0.5 * r, base - 0.5 * r, base + 0.5 * r, base - 0.5 * r]
}

/// Two rows `mu + delta`, `mu - delta` of four features whose aggregated
/// moments are `m` (up to f32 rounding). With `mu` and `delta` as the mean
/// and half-difference, `m1 = sum(mu)`, `m2 = sum(mu^2)`,
/// `m3 = m2 + sum(delta^2)` and `m3 + m4 = sum(mu)^2 + sum(delta)^2`.
/// Returns `None` when `m` is not attainable this way.
pub fn realise_moments(m: [f64; 4]) -> Option<Vec<f32>> {
    let [m1, m2, m3, m4] = m;
    let delta_sq = m3 - m2;
    let delta_sum_sq = m3 + m4 - m1 * m1;
    if m2 < m1 * m1 / 4.0 || delta_sq < 0.0 || delta_sum_sq < 0.0 || delta_sq < delta_sum_sq / 4.0 {
        return None;
    }
    let mu = with_sum_and_square(m1, m2);
    let delta = with_sum_and_square(delta_sum_sq.sqrt(), delta_sq);
    let plus = (0..4).map(|i| (mu[i] + delta[i]) as f32);
    let minus = (0..4).map(|i| (mu[i] - delta[i]) as f32);
    Some(plus.chain(minus).collect())
}

impl Scenario {
    /// Activation snapshots whose moment trajectories are, slice by slice,
    /// the same increasing affine image of the source and target
    /// trajectories. Correlation-based scoring cannot tell the difference.
    pub fn realise(&self) -> (Vec<ActivationSnapshot>, Vec<ActivationSnapshot>) {
        let n_layers = self.source.n_layers();
        let t_len = self.source.len();
        // Per-slice range over both populations.
        let mut lo = vec![[f64::INFINITY; 4]; n_layers];
        let mut hi = vec![[f64::NEG_INFINITY; 4]; n_layers];
        for traj in [&self.source, &self.target] {
            for t in 0..t_len {
                for l in 0..n_layers {
                    let v = traj.at(t, l);
                    for m in 0..4 {
                        lo[l][m] = lo[l][m].min(v[m]);
                        hi[l][m] = hi[l][m].max(v[m]);
                    }
                }
            }
        }
        let build = |traj: &Trajectory, population: PopulationKind| -> Vec<ActivationSnapshot> {
            (0..t_len)
                .map(|t| {
                    let layers = (0..n_layers)
                        .map(|l| {
                            let v = traj.at(t, l);
                            let mapped: [f64; 4] = std::array::from_fn(|m| {
                                let width = hi[l][m] - lo[l][m];
                                let unit = if width > 0.0 { (v[m] - lo[l][m]) / width } else { 0.5 };
                                REALISED_BOX[m] + unit
                            });
                            let values = realise_moments(mapped).expect("realised box is feasible");
                            LayerActivations::new(l as u32, REALISED_EXAMPLES, REALISED_FEATURES, values)
                        })
                        .collect();
                    ActivationSnapshot::new(traj.checkpoints()[t], population, layers)
                })
                .collect()
        };
        (build(&self.source, PopulationKind::SourceValid), build(&self.target, PopulationKind::Target))
    }

    /// Validation curve rising to its peak at the last checkpoint.
    pub fn valid_curve(&self) -> AccuracyCurve {
        let cps = self.source.checkpoints().to_vec();
        let n = cps.len() as f64;
        let values = (0..cps.len()).map(|t| (t + 1) as f64 / n).collect();
        AccuracyCurve::new(cps, values, CurveKind::Maximize).expect("valid curve")
    }

    /// Target curve peaking at the breakpoint.
    pub fn target_curve(&self) -> AccuracyCurve {
        let cps = self.source.checkpoints().to_vec();
        let n = cps.len() as f64;
        let b = self.truth.breakpoint as f64;
        let values = cps.iter().map(|&c| 1.0 - (c as f64 - b).abs() / n).collect();
        AccuracyCurve::new(cps, values, CurveKind::Maximize).expect("target curve")
    }

    /// Writes realised snapshots, `manifest.json` (spec and ground truth in
    /// `meta`), `valid_curve.csv` and `target_curve.csv` into `dir`.
    pub fn write_to(&self, dir: &Path, run_id: &str) -> Result<RunManifest, SnapshotError> {
        let (source, target) = self.realise();
        let mut meta = serde_json::Map::new();
        meta.insert("generator".into(), "scenario".into());
        meta.insert("spec".into(), serde_json::to_value(&self.spec).expect("spec serialises"));
        meta.insert("truth".into(), serde_json::to_value(self.truth).expect("truth serialises"));
        RunDir {
            run_id,
            checkpoints: self.source.checkpoints(),
            layer_dims: &vec![REALISED_FEATURES; self.source.n_layers()],
            populations: &[(SOURCE_VALID_TAG, &source), (TARGET_TAG, &target)],
            curves: &[(VALID_CURVE_FILE, &self.valid_curve()), (TARGET_CURVE_FILE, &self.target_curve())],
            meta,
        }
        .write(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::stopping_time;

    #[test]
    fn mirror_reverses_tail() {
        assert_eq!(
            mirror_after(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2),
            vec![0.0, 1.0, 2.0, 5.0, 4.0, 3.0]
        );
    }

    #[test]
    fn noise_free_recovery() {
        let spec = ScenarioSpec {
            layers: 3,
            checkpoints: 11,
            planted_layer: 1,
            planted_moment: Moment::M3,
            breakpoint: 5,
            ..ScenarioSpec::default()
        };
        let s = generate_scenario(&spec).unwrap();
        let r = stopping_time(&s.target, &s.source, s.truth.t_valid_star).unwrap();
        assert!(r.diverged);
        assert_eq!((r.critical_layer, r.critical_moment, r.t_hat), (1, Moment::M3, 5));
    }

    #[test]
    fn latest_breakpoint_still_detected() {
        // Two points after the breakpoint: the minimal window.
        let spec = ScenarioSpec {
            checkpoints: 9,
            breakpoint: 6,
            planted_layer: 0,
            planted_moment: Moment::M1,
            seed: 3,
            ..ScenarioSpec::default()
        };
        let s = generate_scenario(&spec).unwrap();
        let r = stopping_time(&s.target, &s.source, 8).unwrap();
        assert_eq!((r.critical_layer, r.critical_moment, r.t_hat), (0, Moment::M1, 6));
        assert_eq!(r.best_score, 2.0);
    }

    #[test]
    fn non_planted_slices_match() {
        let s = generate_scenario(&ScenarioSpec::default()).unwrap();
        for layer in 0..4 {
            for m in Moment::ALL {
                let a = s.source.slice_values(layer, m).unwrap();
                let b = s.target.slice_values(layer, m).unwrap();
                assert_eq!(a == b, !(layer == 1 && m == Moment::M3));
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let base = ScenarioSpec::default();
        for spec in [
            ScenarioSpec { breakpoint: 0, ..base.clone() },
            ScenarioSpec { breakpoint: 9, ..base.clone() },
            ScenarioSpec { planted_layer: 4, ..base.clone() },
            ScenarioSpec { noise_sigma: -1.0, ..base.clone() },
            ScenarioSpec { checkpoints: 3, breakpoint: 1, ..base.clone() },
            ScenarioSpec { layers: 0, planted_layer: 0, ..base.clone() },
        ] {
            assert!(generate_scenario(&spec).is_err(), "{spec:?}");
        }
        assert!(generate_scenario(&ScenarioSpec { breakpoint: 8, ..base }).is_ok());
    }
}
