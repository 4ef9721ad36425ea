//! Curve-extremum stopping and generalization-gap accounting.
//!
//! Accuracy (or loss) curves come from the training harness as CSV with a
//! `checkpoint,value` header. The engine never computes task accuracy itself.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::DivergenceReport;
use crate::trajectory::fmt_f64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("curve is empty")]
    EmptyCurve,
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("checkpoint {checkpoint} ({role}) is not on the curve's axis")]
    MissingCheckpoint { checkpoint: u64, role: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("curve csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// Accuracy-like: higher is better.
    #[default]
    Maximize,
    /// Loss-like: lower is better.
    Minimize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    checkpoints: Vec<u64>,
    values: Vec<f64>,
    kind: CurveKind,
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    checkpoint: u64,
    value: f64,
}

impl AccuracyCurve {
    pub fn new(checkpoints: Vec<u64>, values: Vec<f64>, kind: CurveKind) -> Result<Self, EvalError> {
        if checkpoints.len() != values.len() {
            return Err(EvalError::InvalidCurve(format!(
                "{} checkpoints but {} values",
                checkpoints.len(),
                values.len()
            )));
        }
        if let Some(w) = checkpoints.windows(2).find(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidCurve(format!(
                "checkpoints must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::InvalidCurve(format!(
                "non-finite value at checkpoint {}",
                checkpoints[i]
            )));
        }
        Ok(AccuracyCurve {
            checkpoints,
            values,
            kind,
        })
    }

    pub fn checkpoints(&self) -> &[u64] {
        &self.checkpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_at(&self, checkpoint: u64) -> Option<f64> {
        self.checkpoints
            .binary_search(&checkpoint)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn from_csv_reader<R: Read>(reader: R, kind: CurveKind) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["checkpoint", "value"] {
            return Err(EvalError::InvalidCurve(format!(
                "expected header \"checkpoint,value\", found {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut checkpoints = Vec::new();
        let mut values = Vec::new();
        for row in rdr.deserialize() {
            let row: CurveRow = row?;
            checkpoints.push(row.checkpoint);
            values.push(row.value);
        }
        AccuracyCurve::new(checkpoints, values, kind)
    }

    pub fn load(path: &Path, kind: CurveKind) -> Result<Self, EvalError> {
        let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        AccuracyCurve::from_csv_reader(file, kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["checkpoint", "value"])?;
        for (c, v) in self.checkpoints.iter().zip(&self.values) {
            w.write_record([c.to_string(), fmt_f64(*v)])?;
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

/// Checkpoint at the curve's best value; ties go to the earliest checkpoint.
pub fn stop_at_extremum(curve: &AccuracyCurve) -> Result<u64, EvalError> {
    let mut best = 0;
    for i in 1..curve.values.len() {
        let better = match curve.kind {
            CurveKind::Maximize => curve.values[i] > curve.values[best],
            CurveKind::Minimize => curve.values[i] < curve.values[best],
        };
        if better {
            best = i;
        }
    }
    curve.checkpoints.get(best).copied().ok_or(EvalError::EmptyCurve)
}

/// Target accuracy at the activation-based stop, the validation stop and the
/// oracle optimum, with the fraction of the baseline gap that was closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub acc_at_abe: f64,
    pub acc_at_baseline: f64,
    pub acc_optimal: f64,
    /// `(acc_at_abe - acc_at_baseline) / (acc_optimal - acc_at_baseline)`,
    /// or 0 when the baseline is already optimal.
    pub gap_closure: f64,
    pub baseline_optimal: bool,
    pub t_hat: u64,
    pub t_valid_star: u64,
    pub t_star: u64,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serialises");
        s.push('\n');
        s
    }
}

pub fn gap_closure(at_abe: f64, at_baseline: f64, optimal: f64) -> f64 {
    let denom = optimal - at_baseline;
    if denom == 0.0 {
        0.0
    } else {
        (at_abe - at_baseline) / denom + 0.0
    }
}

pub fn evaluate(report: &DivergenceReport, target_curve: &AccuracyCurve) -> Result<EvalSummary, EvalError> {
    evaluate_stops(report.t_hat, report.t_valid_star, target_curve)
}

/// Same as [`evaluate`] for bare stopping checkpoints.
pub fn evaluate_stops(t_hat: u64, t_valid_star: u64, target_curve: &AccuracyCurve) -> Result<EvalSummary, EvalError> {
    let acc_at_abe = target_curve.value_at(t_hat).ok_or(EvalError::MissingCheckpoint {
        checkpoint: t_hat,
        role: "t_hat",
    })?;
    let acc_at_baseline = target_curve.value_at(t_valid_star).ok_or(EvalError::MissingCheckpoint {
        checkpoint: t_valid_star,
        role: "t_valid_star",
    })?;
    let t_star = stop_at_extremum(target_curve)?;
    let acc_optimal = target_curve.value_at(t_star).expect("extremum is on the axis");
    Ok(EvalSummary {
        acc_at_abe,
        acc_at_baseline,
        acc_optimal,
        gap_closure: gap_closure(acc_at_abe, acc_at_baseline, acc_optimal),
        baseline_optimal: acc_optimal == acc_at_baseline,
        t_hat,
        t_valid_star,
        t_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(values: &[f64], kind: CurveKind) -> AccuracyCurve {
        AccuracyCurve::new((0..values.len() as u64).collect(), values.to_vec(), kind).unwrap()
    }

    #[test]
    fn extremum_examples() {
        assert_eq!(stop_at_extremum(&curve(&[0.2, 0.5, 0.4], CurveKind::Maximize)).unwrap(), 1);
        assert_eq!(stop_at_extremum(&curve(&[0.5, 0.5, 0.4], CurveKind::Maximize)).unwrap(), 0);
        assert_eq!(stop_at_extremum(&curve(&[3.0, 1.2, 2.5], CurveKind::Minimize)).unwrap(), 1);
        assert!(matches!(
            stop_at_extremum(&curve(&[], CurveKind::Maximize)),
            Err(EvalError::EmptyCurve)
        ));
    }

    #[test]
    fn monotone_curves() {
        assert_eq!(stop_at_extremum(&curve(&[0.1, 0.2, 0.3], CurveKind::Maximize)).unwrap(), 2);
        assert_eq!(stop_at_extremum(&curve(&[0.3, 0.2, 0.1], CurveKind::Maximize)).unwrap(), 0);
    }

    #[test]
    fn gap_closure_examples() {
        let c = AccuracyCurve::new(vec![0, 2, 4, 6], vec![0.30, 0.40, 0.35, 0.25], CurveKind::Maximize).unwrap();
        let s = evaluate_stops(2, 6, &c).unwrap();
        assert_eq!((s.acc_at_abe, s.acc_at_baseline, s.acc_optimal), (0.40, 0.25, 0.40));
        assert_eq!(s.gap_closure, (0.40 - 0.25) / (0.40 - 0.25));
        assert_eq!(s.gap_closure, 1.0);
        assert_eq!(s.t_star, 2);
        assert!(!s.baseline_optimal);

        let s = evaluate_stops(4, 4, &c).unwrap();
        assert_eq!(s.gap_closure, 0.0);

        let s = evaluate_stops(0, 2, &c).unwrap();
        assert!(s.baseline_optimal);
        assert_eq!(s.gap_closure, 0.0);

        assert!(matches!(
            evaluate_stops(3, 6, &c),
            Err(EvalError::MissingCheckpoint { checkpoint: 3, role: "t_hat" })
        ));
    }

    #[test]
    fn csv_parsing() {
        let c = AccuracyCurve::from_csv_reader("checkpoint,value\n0,0.5\n3, 0.75\n".as_bytes(), CurveKind::Maximize).unwrap();
        assert_eq!(c.checkpoints(), &[0, 3]);
        assert_eq!(c.values(), &[0.5, 0.75]);
        assert_eq!(c.to_csv_string(), "checkpoint,value\n0,0.5\n3,0.75\n");
        assert!(AccuracyCurve::from_csv_reader("step,acc\n0,1\n".as_bytes(), CurveKind::Maximize).is_err());
        assert!(AccuracyCurve::from_csv_reader("checkpoint,value\n2,1\n1,1\n".as_bytes(), CurveKind::Maximize).is_err());
        assert!(AccuracyCurve::from_csv_reader("checkpoint,value\n2,NaN\n".as_bytes(), CurveKind::Maximize).is_err());
    }
}
