//! Trajectory divergence and the activation-based stopping time.
//!
//! For one (layer, moment) slice, the divergence of the target trajectory
//! from the source trajectory over a half-open window `(t1, t2]` is
//!
//! ```text
//! d = -rho(target, source over t1 < t <= t2) * (t2 - t1)
//! ```
//!
//! With `t2` fixed at the validation-optimal checkpoint, the critical slice
//! is the one whose best window scores highest, and the stopping time is the
//! start `t1` of that window. When no slice scores above zero the stopping
//! time falls back to the validation-optimal checkpoint.
//!
//! Conventions:
//! - `t2 - t1` counts observed checkpoints ([`IntervalUnit::Rank`]) unless raw
//!   checkpoint indices are requested.
//! - A window needs at least two observed points; shorter windows are skipped.
//! - A window where either series is constant has no defined correlation and
//!   scores 0.
//! - Ties go to the lower layer, then the lower moment, then the earlier `t1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::moments::Moment;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("window ({t1}, {t2}] holds {points} observed checkpoint(s); at least 2 are needed")]
    WindowTooSmall { t1: u64, t2: u64, points: usize },
    #[error("checkpoint {checkpoint} is not observed (observed range {first}..={last}, {count} checkpoints)")]
    UnobservedCheckpoint {
        checkpoint: u64,
        first: u64,
        last: u64,
        count: usize,
    },
    #[error("degenerate axis: {available} checkpoint(s) at or before {t_valid_star}; at least 3 are needed for one two-point window")]
    DegenerateAxis { t_valid_star: u64, available: usize },
    #[error("trajectories disagree: {0}")]
    Incompatible(String),
}

/// How the window length `t2 - t1` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalUnit {
    /// Number of observed checkpoint steps; independent of checkpoint cadence.
    #[default]
    Rank,
    /// Difference of the raw checkpoint indices.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DivergenceOptions {
    pub interval_unit: IntervalUnit,
    pub execution: Execution,
}

/// Sample Pearson correlation. `Ok(None)` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>, DivergenceError> {
    if a.len() != b.len() {
        return Err(DivergenceError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(DivergenceError::TooShort(a.len()));
    }
    Ok(pearson_unchecked(a, b))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> Option<f64> {
    if is_constant(a) || is_constant(b) {
        return None;
    }
    if a.len() == 2 {
        // Exactly +-1; the general formula can land an ulp short.
        let same = (a[1] > a[0]) == (b[1] > b[0]);
        return Some(if same { 1.0 } else { -1.0 });
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    let prod = saa * sbb;
    let denom = if prod.is_normal() { prod.sqrt() } else { saa.sqrt() * sbb.sqrt() };
    Some((sab / denom).clamp(-1.0, 1.0))
}

/// Divergence over one window of one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub t1: u64,
    pub t2: u64,
    /// `None` when either series is constant over the window.
    pub rho: Option<f64>,
    pub score: f64,
}

/// Best window of one (layer, moment) slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceScore {
    pub layer: usize,
    pub moment: Moment,
    pub t1: u64,
    pub t2: u64,
    pub rho: Option<f64>,
    pub score: f64,
}

fn span(checkpoints: &[u64], i: usize, j: usize, unit: IntervalUnit) -> f64 {
    match unit {
        IntervalUnit::Rank => (j - i) as f64,
        IntervalUnit::Raw => (checkpoints[j] - checkpoints[i]) as f64,
    }
}

/// Scores the window of positions `(i, j]`. Requires `j >= i + 2`.
fn score_positions(target: &[f64], source: &[f64], checkpoints: &[u64], i: usize, j: usize, unit: IntervalUnit) -> WindowScore {
    let rho = pearson_unchecked(&target[i + 1..=j], &source[i + 1..=j]);
    let score = match rho {
        // -0.0 would leak into reports as "-0"
        Some(r) => (-r * span(checkpoints, i, j, unit)) + 0.0,
        None => 0.0,
    };
    WindowScore {
        t1: checkpoints[i],
        t2: checkpoints[j],
        rho,
        score,
    }
}

fn position(checkpoints: &[u64], t: u64) -> Result<usize, DivergenceError> {
    checkpoints
        .binary_search(&t)
        .map_err(|_| DivergenceError::UnobservedCheckpoint {
            checkpoint: t,
            first: checkpoints.first().copied().unwrap_or(0),
            last: checkpoints.last().copied().unwrap_or(0),
            count: checkpoints.len(),
        })
}

/// Divergence of `target` from `source` over `(t1, t2]`, where both bounds are
/// observed checkpoints of `checkpoints`.
pub fn divergence_score(
    target: &[f64],
    source: &[f64],
    checkpoints: &[u64],
    t1: u64,
    t2: u64,
    unit: IntervalUnit,
) -> Result<WindowScore, DivergenceError> {
    if target.len() != source.len() {
        return Err(DivergenceError::LengthMismatch(target.len(), source.len()));
    }
    if target.len() != checkpoints.len() {
        return Err(DivergenceError::LengthMismatch(target.len(), checkpoints.len()));
    }
    let i = position(checkpoints, t1)?;
    let j = position(checkpoints, t2)?;
    let points = j.saturating_sub(i);
    if points < 2 {
        return Err(DivergenceError::WindowTooSmall { t1, t2, points });
    }
    Ok(score_positions(target, source, checkpoints, i, j, unit))
}

/// Best window ending at position `end` for one slice: highest score, ties to
/// the earliest start.
fn best_window(target: &[f64], source: &[f64], checkpoints: &[u64], end: usize, unit: IntervalUnit) -> WindowScore {
    debug_assert!(end >= 2);
    let mut best = score_positions(target, source, checkpoints, 0, end, unit);
    for i in 1..=end - 2 {
        let w = score_positions(target, source, checkpoints, i, end, unit);
        if w.score > best.score {
            best = w;
        }
    }
    best
}

/// Critical (layer, moment) slice and the per-slice maxima it was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSlice {
    pub best: DivergenceScore,
    /// One entry per (layer, moment), layer-major.
    pub per_slice: Vec<DivergenceScore>,
}

impl CriticalSlice {
    pub fn layer(&self) -> usize {
        self.best.layer
    }

    pub fn moment(&self) -> Moment {
        self.best.moment
    }
}

fn check_compatible(target: &Trajectory, source: &Trajectory) -> Result<(), DivergenceError> {
    if target.checkpoints() != source.checkpoints() {
        return Err(DivergenceError::Incompatible(format!(
            "checkpoint axes differ ({} vs {} checkpoints)",
            target.len(),
            source.len()
        )));
    }
    if target.n_layers() != source.n_layers() {
        return Err(DivergenceError::Incompatible(format!(
            "layer counts differ ({} vs {})",
            target.n_layers(),
            source.n_layers()
        )));
    }
    Ok(())
}

/// Position of `t_valid_star` on the shared axis, checked to leave room for
/// at least one two-point window.
fn end_position(checkpoints: &[u64], t_valid_star: u64) -> Result<usize, DivergenceError> {
    let end = position(checkpoints, t_valid_star)?;
    if end < 2 {
        return Err(DivergenceError::DegenerateAxis {
            t_valid_star,
            available: end + 1,
        });
    }
    Ok(end)
}

pub fn find_critical(
    target: &Trajectory,
    source: &Trajectory,
    t_valid_star: u64,
    opts: &DivergenceOptions,
) -> Result<CriticalSlice, DivergenceError> {
    check_compatible(target, source)?;
    let checkpoints = target.checkpoints();
    let end = end_position(checkpoints, t_valid_star)?;
    let n_slices = target.n_layers() * 4;

    let per_slice = opts.execution.map_range(n_slices, |k| {
        let (layer, moment) = (k / 4, Moment::ALL[k % 4]);
        let tv = target.slice_values(layer, moment).expect("layer in range");
        let sv = source.slice_values(layer, moment).expect("layer in range");
        let w = best_window(&tv, &sv, checkpoints, end, opts.interval_unit);
        DivergenceScore {
            layer,
            moment,
            t1: w.t1,
            t2: w.t2,
            rho: w.rho,
            score: w.score,
        }
    });

    // Slices are in (layer, moment) order, so a strict comparison keeps the
    // tie-break deterministic regardless of how they were computed.
    let mut best = per_slice[0];
    for s in &per_slice[1..] {
        if s.score > best.score {
            best = *s;
        }
    }
    Ok(CriticalSlice { best, per_slice })
}

/// Outcome of the stopping-time search. Serialises with the field names
/// downstream tooling expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub critical_layer: usize,
    pub critical_moment: Moment,
    pub t_hat: u64,
    pub t_valid_star: u64,
    pub diverged: bool,
    pub best_score: f64,
    pub scores: Vec<DivergenceScore>,
}

impl DivergenceReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

pub fn stopping_time(target: &Trajectory, source: &Trajectory, t_valid_star: u64) -> Result<DivergenceReport, DivergenceError> {
    stopping_time_with(target, source, t_valid_star, &DivergenceOptions::default())
}

pub fn stopping_time_with(
    target: &Trajectory,
    source: &Trajectory,
    t_valid_star: u64,
    opts: &DivergenceOptions,
) -> Result<DivergenceReport, DivergenceError> {
    let critical = find_critical(target, source, t_valid_star, opts)?;
    let best = critical.best;
    let diverged = best.score > 0.0;
    Ok(DivergenceReport {
        critical_layer: best.layer,
        critical_moment: best.moment,
        t_hat: if diverged { best.t1 } else { t_valid_star },
        t_valid_star,
        diverged,
        best_score: best.score,
        scores: critical.per_slice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), None);
        assert_eq!(pearson(&[1.0], &[1.0]), Err(DivergenceError::TooShort(1)));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(DivergenceError::LengthMismatch(2, 1)));
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let a = [0.3, 1.9, -0.4, 2.2, 5.0, 4.1];
        let b = [1.0, 0.5, 0.7, -2.0, 0.1, 3.3];
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let expected = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        let got = pearson(&a, &b).unwrap().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn window_scores() {
        let cps: Vec<u64> = (0..5).collect();
        let src = [0.0, 1.0, 2.0, 3.0, 4.0];
        let anti = [9.0, 8.0, 7.0, 6.0, 5.0];
        let w = divergence_score(&anti, &src, &cps, 0, 4, IntervalUnit::Rank).unwrap();
        assert_eq!(w.rho, Some(-1.0));
        assert_eq!(w.score, 4.0);
        let w = divergence_score(&src, &src, &cps, 0, 4, IntervalUnit::Rank).unwrap();
        assert_eq!(w.score, -4.0);
        let flat = [1.0; 5];
        let w = divergence_score(&flat, &src, &cps, 0, 4, IntervalUnit::Rank).unwrap();
        assert_eq!((w.rho, w.score), (None, 0.0));
        assert_eq!(
            divergence_score(&anti, &src, &cps, 3, 4, IntervalUnit::Rank),
            Err(DivergenceError::WindowTooSmall { t1: 3, t2: 4, points: 1 })
        );
    }

    #[test]
    fn raw_interval_unit_uses_checkpoint_indices() {
        let cps = [0u64, 10, 20, 30];
        let src = [0.0, 1.0, 2.0, 3.0];
        let anti = [3.0, 2.0, 1.0, 0.0];
        let rank = divergence_score(&anti, &src, &cps, 0, 30, IntervalUnit::Rank).unwrap();
        let raw = divergence_score(&anti, &src, &cps, 0, 30, IntervalUnit::Raw).unwrap();
        assert_eq!(rank.score, 3.0);
        assert_eq!(raw.score, 30.0);
        assert!(matches!(
            divergence_score(&anti, &src, &cps, 5, 30, IntervalUnit::Rank),
            Err(DivergenceError::UnobservedCheckpoint { checkpoint: 5, .. })
        ));
    }

    fn single_slice(target: Vec<f64>, source: Vec<f64>) -> (Trajectory, Trajectory) {
        let t = target.len();
        let row = |v: f64| [v, 0.0, 0.0, 0.0];
        let cps: Vec<u64> = (0..t as u64).collect();
        (
            Trajectory::new("target", cps.clone(), 1, target.into_iter().map(row).collect()).unwrap(),
            Trajectory::new("source_valid", cps, 1, source.into_iter().map(row).collect()).unwrap(),
        )
    }

    #[test]
    fn anti_correlation_only_after_two() {
        // Co-moving until checkpoint 2, then the target falls while the source rises.
        let source: Vec<f64> = (0..8).map(|t| t as f64).collect();
        let target = vec![0.0, 1.0, 2.0, 9.0, 8.0, 7.0, 6.0, 5.0];
        let (tt, st) = single_slice(target.clone(), source.clone());
        let r = stopping_time(&tt, &st, 7).unwrap();

        // Exhaustive check over every admissible window start.
        let mut best = (f64::NEG_INFINITY, 0);
        for t1 in 0..=5u64 {
            let s = divergence_score(&target, &source, tt.checkpoints(), t1, 7, IntervalUnit::Rank)
                .unwrap()
                .score;
            if s > best.0 {
                best = (s, t1);
            }
        }
        assert_eq!(best.1, 2);
        assert!(r.diverged);
        assert_eq!(r.t_hat, 2);
        assert_eq!(r.best_score, best.0);
    }

    #[test]
    fn positive_correlation_falls_back() {
        let source: Vec<f64> = (0..6).map(|t| (t * t) as f64).collect();
        let target: Vec<f64> = source.iter().map(|v| 3.0 * v + 1.0).collect();
        let (tt, st) = single_slice(target, source);
        let r = stopping_time(&tt, &st, 4).unwrap();
        assert!(!r.diverged);
        assert_eq!(r.t_hat, 4);
        // m2..m4 are constant in this fixture and score 0; m1 scores -2 at
        // its shortest window.
        assert_eq!(r.best_score, 0.0);
        assert_eq!((r.scores[0].t1, r.scores[0].score), (2, -2.0));
    }

    #[test]
    fn degenerate_and_unobserved_axes() {
        let (tt, st) = single_slice(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]);
        assert_eq!(
            stopping_time(&tt, &st, 1),
            Err(DivergenceError::DegenerateAxis { t_valid_star: 1, available: 2 })
        );
        assert!(matches!(
            stopping_time(&tt, &st, 7),
            Err(DivergenceError::UnobservedCheckpoint { checkpoint: 7, first: 0, last: 2, count: 3 })
        ));
        let (short, _) = single_slice(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!(matches!(stopping_time(&short, &st, 2), Err(DivergenceError::Incompatible(_))));
    }

    #[test]
    fn report_json_fields() {
        let (tt, st) = single_slice(vec![0.0, 1.0, 2.0, 1.0], vec![0.0, 1.0, 2.0, 3.0]);
        let r = stopping_time(&tt, &st, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["critical_layer", "critical_moment", "t_hat", "t_valid_star", "diverged", "best_score", "scores"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["critical_moment"], "m1");
        assert_eq!(v["scores"].as_array().unwrap().len(), 4);
        // m2..m4 are constant zero in this fixture.
        assert!(v["scores"][1]["rho"].is_null());
        let back: DivergenceReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
