//! Discrimination and calibration metrics, threshold sweeps and the
//! modality-ablation table.
//!
//! A score counts as a positive prediction at threshold `t` iff `score > t`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureTable, Modality, ModalitySet};
use crate::model::{chronological_split, grid_search, Grid, ModelError, ModelKind, SplitSpec, TrainSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("calibration needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::Label(l));
    }
    Ok(())
}

/// One ROC vertex: rates after flagging every score `>=` the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Cumulative (fp, tp) counts at each distinct score, descending.
fn roc_counts(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, fp, tp));
    }
    out
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>, EvalError> {
    check(scores, labels)?;
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(EvalError::SingleClass);
    }
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    curve.extend(roc_counts(scores, labels).into_iter().map(|(s, fp, tp)| RocPoint {
        threshold: s,
        fpr: fp as f64 / n,
        tpr: tp as f64 / p,
    }));
    Ok(curve)
}

/// Area under the ROC curve by trapezoidal integration over tied-score groups.
///
/// Twice the area is accumulated in integers, so the result is exactly the
/// Mann–Whitney probability that a positive outranks a negative (ties ½).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let (mut area2, mut prev_fp, mut prev_tp) = (0u128, 0u128, 0u128);
    for (_, fp, tp) in roc_counts(scores, labels) {
        let (fp, tp) = (u128::from(fp), u128::from(tp));
        area2 += (fp - prev_fp) * (tp + prev_tp);
        prev_fp = fp;
        prev_tp = tp;
    }
    Ok(area2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// 0 when nothing is flagged; see `no_predicted_positives`.
    pub precision: f64,
    pub no_predicted_positives: bool,
}

impl ThresholdMetrics {
    pub fn from_counts(threshold: f64, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        ThresholdMetrics {
            threshold,
            tp,
            fp,
            tn,
            fn_,
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            precision: ratio(tp, tp + fp),
            no_predicted_positives: tp + fp == 0,
        }
    }
}

/// Confusion counts and rates at each threshold, flagging `score > t`.
pub fn threshold_sweep(
    scores: &[f64],
    labels: &[u8],
    thresholds: &[f64],
) -> Result<Vec<ThresholdMetrics>, EvalError> {
    check(scores, labels)?;
    let mut pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let mut neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| {
            // Rows at or below t are predicted negative.
            let fn_ = pos.partition_point(|&s| s <= t) as u64;
            let tn = neg.partition_point(|&s| s <= t) as u64;
            let tp = pos.len() as u64 - fn_;
            let fp = neg.len() as u64 - tn;
            ThresholdMetrics::from_counts(t, tp, fp, tn, fn_)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    /// `None` for empty bins.
    pub mean_score: Option<f64>,
    pub event_rate: Option<f64>,
}

/// Equal-width bins on [0, 1]; a score of exactly 1 falls in the last bin.
pub fn calibration_curve(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<Vec<CalibrationBin>, EvalError> {
    check(scores, labels)?;
    if n_bins < 2 {
        return Err(EvalError::Bins(n_bins));
    }
    let mut sum = vec![0.0; n_bins];
    let mut events = vec![0u64; n_bins];
    let mut count = vec![0u64; n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        sum[b] += s;
        events[b] += u64::from(l);
        count[b] += 1;
    }
    Ok((0..n_bins)
        .map(|b| CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_score: (count[b] > 0).then(|| sum[b] / count[b] as f64),
            event_rate: (count[b] > 0).then(|| events[b] as f64 / count[b] as f64),
        })
        .collect())
}

/// Named x/y series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn roc_series(curve: &[RocPoint]) -> PlotSeries {
    PlotSeries {
        name: "roc".into(),
        x: curve.iter().map(|p| p.fpr).collect(),
        y: curve.iter().map(|p| p.tpr).collect(),
    }
}

/// Sensitivity, specificity and precision against threshold.
pub fn sweep_series(sweep: &[ThresholdMetrics]) -> Vec<PlotSeries> {
    let x: Vec<f64> = sweep.iter().map(|m| m.threshold).collect();
    let series = |name: &str, f: fn(&ThresholdMetrics) -> f64| PlotSeries {
        name: name.into(),
        x: x.clone(),
        y: sweep.iter().map(f).collect(),
    };
    vec![
        series("sensitivity", |m| m.sensitivity),
        series("specificity", |m| m.specificity),
        series("precision", |m| m.precision),
    ]
}

/// Mean score against event rate over occupied bins.
pub fn calibration_series(bins: &[CalibrationBin]) -> PlotSeries {
    let occupied: Vec<&CalibrationBin> = bins.iter().filter(|b| b.count > 0).collect();
    PlotSeries {
        name: "calibration".into(),
        x: occupied.iter().filter_map(|b| b.mean_score).collect(),
        y: occupied.iter().filter_map(|b| b.event_rate).collect(),
    }
}

pub fn format_sweep_table(sweep: &[ThresholdMetrics]) -> String {
    let mut out = format!(
        "{:>9} {:>11} {:>11} {:>9} {:>7} {:>7} {:>7} {:>7}\n",
        "threshold", "sensitivity", "specificity", "precision", "TP", "FP", "TN", "FN"
    );
    for m in sweep {
        let _ = writeln!(
            out,
            "{:>9.4} {:>11.3} {:>11.3} {:>9.3}{} {:>6} {:>7} {:>7} {:>7}",
            m.threshold,
            m.sensitivity,
            m.specificity,
            m.precision,
            if m.no_predicted_positives { "*" } else { " " },
            m.tp,
            m.fp,
            m.tn,
            m.fn_
        );
    }
    if sweep.iter().any(|m| m.no_predicted_positives) {
        out.push_str("* no predicted positives; precision reported as 0\n");
    }
    out
}

pub fn format_calibration_table(bins: &[CalibrationBin]) -> String {
    let mut out = format!("{:>13} {:>7} {:>10} {:>10}\n", "bin", "count", "mean score", "event rate");
    for b in bins {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "[{:.2}, {:.2}{} {:>7} {:>10} {:>10}",
            b.lower,
            b.upper,
            if b.upper >= 1.0 { "]" } else { ")" },
            b.count,
            opt(b.mean_score),
            opt(b.event_rate)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub modalities: ModalitySet,
    pub kind: ModelKind,
    pub n_features: usize,
    pub test_auroc: f64,
    pub n_estimators: usize,
    pub max_depth: usize,
}

/// Grid-searches and tests one model per (modality set, kind) cell on a
/// single chronological split of `table`.
pub fn ablation_table(
    table: &FeatureTable,
    spec: &SplitSpec,
    sets: &[ModalitySet],
    kinds: &[ModelKind],
    grid: &Grid,
    seed: u64,
) -> Result<Vec<AblationCell>, EvalError> {
    let splits = chronological_split(table, spec)?;
    let jobs: Vec<(ModalitySet, ModelKind)> = sets
        .iter()
        .flat_map(|&s| kinds.iter().map(move |&k| (s, k)))
        .collect();
    jobs.par_iter()
        .map(|&(set, kind)| {
            let pick = |t: &FeatureTable| TrainSet::from_table(&t.select(set));
            let (train, val, test) = (pick(&splits.train), pick(&splits.val), pick(&splits.test));
            let result = grid_search(&train, &val, grid, kind, seed)?;
            let scores = result.model.predict_batch(&test.rows)?;
            Ok(AblationCell {
                modalities: set,
                kind,
                n_features: train.n_features(),
                test_auroc: auroc(&scores, &test.labels)?,
                n_estimators: result.best.n_estimators,
                max_depth: result.best.max_depth,
            })
        })
        .collect()
}

fn combination_label(set: ModalitySet) -> String {
    let names: Vec<&str> = set
        .iter()
        .map(|m| match m {
            Modality::Tabular => "Tabular",
            Modality::Timeseries => "Time series",
            Modality::Text => "Language",
        })
        .collect();
    if names.len() == 1 {
        format!("{} only", names[0])
    } else {
        names.join(" & ")
    }
}

/// Rows grouped by number of modalities, one AUROC column per model kind.
pub fn format_ablation_table(cells: &[AblationCell]) -> String {
    let mut kinds: Vec<ModelKind> = cells.iter().map(|c| c.kind).collect();
    kinds.sort();
    kinds.dedup();
    kinds.reverse(); // Random Forest before Gradient Boosted Trees
    let width = 36;
    let mut out = format!("{:<width$}", "Data Combinations");
    for k in &kinds {
        let _ = write!(out, " {:>24}", k.label());
    }
    out.push('\n');
    for (n, heading) in [(1, "Single Modality"), (2, "Two Modalities"), (3, "All Modalities")] {
        let sets: Vec<ModalitySet> = ModalitySet::combinations()
            .into_iter()
            .filter(|s| s.iter().count() == n && cells.iter().any(|c| c.modalities == *s))
            .collect();
        if sets.is_empty() {
            continue;
        }
        let _ = writeln!(out, "{heading}");
        for set in sets {
            let _ = write!(out, "  {:<w$}", combination_label(set), w = width - 2);
            for k in &kinds {
                match cells.iter().find(|c| c.modalities == set && c.kind == *k) {
                    Some(c) => {
                        let _ = write!(out, " {:>24.3}", c.test_auroc);
                    }
                    None => {
                        let _ = write!(out, " {:>24}", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}
