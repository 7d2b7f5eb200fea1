use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::FeatureTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(ModelError::Split(format!(
                "fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Train, validation and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

/// Row indices of each partition, each sorted by (date, input position).
///
/// Boundaries sit on date edges: for each cumulative target (train, then
/// train + val) the edge whose row count is closest to the target wins,
/// earlier edge on ties, subject to all three parts being non-empty.
pub fn chronological_split_indices(
    dates: &[NaiveDate],
    spec: &SplitSpec,
) -> Result<Splits<Vec<usize>>, ModelError> {
    spec.validate()?;
    if dates.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut order: Vec<usize> = (0..dates.len()).collect();
    order.sort_by_key(|&i| (dates[i], i));
    // edges[k] = number of rows dated on or before the k-th distinct date.
    let mut edges = Vec::new();
    for (pos, w) in order.windows(2).enumerate() {
        if dates[w[0]] != dates[w[1]] {
            edges.push(pos + 1);
        }
    }
    if edges.len() < 2 {
        return Err(ModelError::Split(
            "need at least three distinct dates for three non-empty parts".into(),
        ));
    }
    let n = dates.len() as f64;
    let nearest = |candidates: &[usize], target: f64| -> usize {
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if (c as f64 - target).abs() < (best as f64 - target).abs() {
                best = c;
            }
        }
        best
    };
    // The first boundary must leave at least one later edge for the second.
    let b1 = nearest(&edges[..edges.len() - 1], spec.train * n);
    let later: Vec<usize> = edges.iter().copied().filter(|&e| e > b1).collect();
    let b2 = nearest(&later, (spec.train + spec.val) * n);
    Ok(Splits {
        train: order[..b1].to_vec(),
        val: order[b1..b2].to_vec(),
        test: order[b2..].to_vec(),
    })
}

fn take(table: &FeatureTable, idx: &[usize]) -> FeatureTable {
    FeatureTable {
        manifest: table.manifest.clone(),
        keys: idx.iter().map(|&i| table.keys[i].clone()).collect(),
        rows: idx.iter().map(|&i| table.rows[i].clone()).collect(),
        labels: idx.iter().map(|&i| table.labels[i]).collect(),
    }
}

pub fn chronological_split(table: &FeatureTable, spec: &SplitSpec) -> Result<Splits<FeatureTable>, ModelError> {
    let idx = chronological_split_indices(&table.dates(), spec)?;
    Ok(Splits {
        train: take(table, &idx.train),
        val: take(table, &idx.val),
        test: take(table, &idx.test),
    })
}
