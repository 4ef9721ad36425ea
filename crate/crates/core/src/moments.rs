//! Aggregated activation moments.
//!
//! For a batch of N activation vectors z_n in R^D, with feature means
//! mu_i = (1/N) sum_n z_{n,i} and raw second moments
//! S_ij = (1/N) sum_n z_{n,i} z_{n,j}:
//!
//! ```text
//! m1 = sum_i mu_i
//! m2 = sum_i mu_i^2
//! m3 = sum_i S_ii            (trace of E[z z^T])
//! m4 = sum_{i != j} S_ij     (off-diagonal mass of E[z z^T])
//! ```
//!
//! These are sums over features, not means; any rescaling by 1/D would be
//! absorbed by the Pearson correlation downstream anyway. `m4` uses
//! `(1/N) sum_n (sum_i z_{n,i})^2 - m3`, so the D x D matrix is never formed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::snapshot::LayerActivations;

/// Index of one aggregated moment. Serialises as `"m1"`..`"m4"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Moment {
    #[serde(rename = "m1")]
    M1,
    #[serde(rename = "m2")]
    M2,
    #[serde(rename = "m3")]
    M3,
    #[serde(rename = "m4")]
    M4,
}

impl Moment {
    pub const ALL: [Moment; 4] = [Moment::M1, Moment::M2, Moment::M3, Moment::M4];

    /// Zero-based position within a moment row.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Moment> {
        Moment::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        ["m1", "m2", "m3", "m4"][self.index()]
    }
}

impl fmt::Display for Moment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Moment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "m1" | "1" => Ok(Moment::M1),
            "m2" | "2" => Ok(Moment::M2),
            "m3" | "3" => Ok(Moment::M3),
            "m4" | "4" => Ok(Moment::M4),
            _ => Err(format!("unknown moment {s:?}; expected m1, m2, m3 or m4")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMoments {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl AggregatedMoments {
    pub fn as_array(&self) -> [f64; 4] {
        [self.m1, self.m2, self.m3, self.m4]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        AggregatedMoments {
            m1: a[0],
            m2: a[1],
            m3: a[2],
            m4: a[3],
        }
    }

    pub fn get(&self, m: Moment) -> f64 {
        self.as_array()[m.index()]
    }
}

/// Neumaier-compensated running sum. Deterministic for a fixed input order.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Aggregated moments of one layer batch, accumulated in f64.
pub fn compute_moments(batch: &LayerActivations) -> AggregatedMoments {
    let n = batch.n_examples;
    let d = batch.n_features;
    debug_assert_eq!(batch.values.len(), n * d);
    let inv_n = 1.0 / n as f64;

    // Per-feature sums and sums of squares, accumulated example by example.
    // f32 * f32 is exact in f64, so the squares carry no rounding.
    let mut col_sum = vec![CompensatedSum::default(); d];
    let mut col_sq = vec![CompensatedSum::default(); d];
    let mut row_sq_total = CompensatedSum::default();
    for row in batch.rows() {
        let mut row_sum = CompensatedSum::default();
        for ((z, s), q) in row.iter().zip(&mut col_sum).zip(&mut col_sq) {
            let z = *z as f64;
            s.add(z);
            q.add(z * z);
            row_sum.add(z);
        }
        let r = row_sum.value();
        row_sq_total.add(r * r);
    }

    let mut m1 = CompensatedSum::default();
    let mut m2 = CompensatedSum::default();
    let mut m3 = CompensatedSum::default();
    for (s, q) in col_sum.iter().zip(&col_sq) {
        let mu = s.value() * inv_n;
        m1.add(mu);
        m2.add(mu * mu);
        m3.add(q.value() * inv_n);
    }
    let m3 = m3.value();
    let m4 = row_sq_total.value() * inv_n - m3;
    AggregatedMoments {
        m1: m1.value(),
        m2: m2.value(),
        m3,
        m4,
    }
}

/// Quantities expressible as linear combinations of the aggregated moments.
///
/// These are population identities for two independent draws z, z' from the
/// activation distribution (i != j examples): E[|z|^2] = m3, E[<z, z'>] = m2,
/// E[|z - z'|^2] = 2 (m3 - m2), and the summed per-feature variance m3 - m2.
/// On a finite batch, the empirical mean of <z_n, z_n'> over ordered pairs
/// n != n' is (N m2 - m3) / (N - 1), not m2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub expected_sq_l2_norm: f64,
    pub expected_pairwise_inner_product: f64,
    pub expected_sq_l2_dispersion: f64,
    pub total_feature_variance: f64,
}

impl DerivedMetrics {
    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("expected_sq_l2_norm", self.expected_sq_l2_norm),
            ("expected_pairwise_inner_product", self.expected_pairwise_inner_product),
            ("expected_sq_l2_dispersion", self.expected_sq_l2_dispersion),
            ("total_feature_variance", self.total_feature_variance),
        ])
    }
}

pub fn derived_metrics(m: &AggregatedMoments) -> DerivedMetrics {
    let variance = m.m3 - m.m2;
    DerivedMetrics {
        expected_sq_l2_norm: m.m3,
        expected_pairwise_inner_product: m.m2,
        expected_sq_l2_dispersion: 2.0 * variance,
        total_feature_variance: variance,
    }
}
