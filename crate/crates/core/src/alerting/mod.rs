//! Daily alert tiers, persisted alert runs, clinician feedback and
//! threshold what-if analysis.

mod run;
mod store;

pub use run::{daily_run, snapshot_at_cut, DailyRun};
pub use store::{AlertStore, FeedbackQuery, RunIndexEntry, WriteOutcome};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{label_day, Location, PatientDayKey, PatientStay};
use crate::evaluate::ThresholdMetrics;
use crate::model::{ModelError, TreeEnsemble};
use crate::time::ts_serde;

/// Retraining cadence: a model older than this many days is stale.
pub const MAX_MODEL_AGE_DAYS: i64 = 182;

#[derive(Debug, Error)]
pub enum AlertError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("featurization failed: {0}")]
    Features(#[from] crate::features::FeatureError),
    #[error("alert file for {date} already exists with different content")]
    Conflict { date: NaiveDate },
    #[error("no alert for {0}")]
    UnknownAlert(String),
    #[error("invalid feedback: {0}")]
    Feedback(String),
    #[error("no stored alerts to evaluate")]
    EmptyHistory,
    #[error("model carries no training date")]
    MissingTrainingDate,
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Red,
    Yellow,
    White,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Red => "Red",
            Tier::Yellow => "Yellow",
            Tier::White => "White",
        }
    }

    /// Red 2, Yellow 1, White 0.
    pub fn severity(self) -> u8 {
        match self {
            Tier::Red => 2,
            Tier::Yellow => 1,
            Tier::White => 0,
        }
    }

    pub fn is_alert(self) -> bool {
        self != Tier::White
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "red" => Ok(Tier::Red),
            "yellow" => Ok(Tier::Yellow),
            "white" => Ok(Tier::White),
            _ => Err(format!("unknown tier {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierThresholds {
    pub red_level: f64,
    pub red_delta: f64,
    pub yellow_level: f64,
    pub yellow_delta: f64,
}

impl Default for TierThresholds {
    fn default() -> Self {
        TierThresholds {
            red_level: 0.12,
            red_delta: 0.06,
            yellow_level: 0.03,
            yellow_delta: 0.015,
        }
    }
}

impl TierThresholds {
    pub fn validate(&self) -> Result<(), AlertError> {
        let all = [self.red_level, self.red_delta, self.yellow_level, self.yellow_delta];
        if all.iter().any(|t| !t.is_finite() || *t > 1.0) {
            return Err(AlertError::Thresholds(format!("values must be finite and at most 1: {self:?}")));
        }
        if !(self.red_level > self.yellow_level && self.yellow_level > 0.0) {
            return Err(AlertError::Thresholds(format!(
                "need red_level > yellow_level > 0, got {} and {}",
                self.red_level, self.yellow_level
            )));
        }
        if !(self.red_delta > self.yellow_delta && self.yellow_delta > 0.0) {
            return Err(AlertError::Thresholds(format!(
                "need red_delta > yellow_delta > 0, got {} and {}",
                self.red_delta, self.yellow_delta
            )));
        }
        Ok(())
    }
}

/// Red if the risk or its rise since the previous day exceeds the red
/// thresholds, else Yellow on the yellow thresholds, else White. Comparisons
/// are strict; without a previous risk only the levels apply.
pub fn assign_tier(risk: f64, prev: Option<f64>, th: &TierThresholds) -> Tier {
    let delta = prev.map(|p| risk - p);
    let exceeds = |level: f64, rise: f64| risk > level || delta.is_some_and(|d| d > rise);
    if exceeds(th.red_level, th.red_delta) {
        Tier::Red
    } else if exceeds(th.yellow_level, th.yellow_delta) {
        Tier::Yellow
    } else {
        Tier::White
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub patient_day: PatientDayKey,
    pub risk: f64,
    pub risk_prev1: Option<f64>,
    /// Shown for context only; tiers never depend on it.
    pub risk_prev2: Option<f64>,
    pub tier: Tier,
    #[serde(with = "ts_serde")]
    pub scored_at: NaiveDateTime,
    pub location: Location,
    pub model_stale: bool,
}

impl AlertRecord {
    pub fn delta1(&self) -> Option<f64> {
        self.risk_prev1.map(|p| self.risk - p)
    }

    pub fn delta2(&self) -> Option<f64> {
        self.risk_prev2.map(|p| self.risk - p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
    FalseNegative,
    CornerCase,
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TruePositive" => Ok(Verdict::TruePositive),
            "FalsePositive" => Ok(Verdict::FalsePositive),
            "FalseNegative" => Ok(Verdict::FalseNegative),
            "CornerCase" => Ok(Verdict::CornerCase),
            _ => Err(format!("unknown verdict {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEntry {
    pub patient_day: PatientDayKey,
    pub verdict: Verdict,
    pub note: String,
    pub author: String,
    #[serde(with = "ts_serde")]
    pub ts: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    /// Position of the entry in the ledger, starting at 0.
    pub sequence: usize,
    pub patient_day: PatientDayKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Freshness {
    Fresh,
    Stale,
}

/// Stale iff more than [`MAX_MODEL_AGE_DAYS`] days have passed since training.
pub fn freshness(trained_on: NaiveDate, today: NaiveDate) -> Freshness {
    if (today - trained_on).num_days() > MAX_MODEL_AGE_DAYS {
        Freshness::Stale
    } else {
        Freshness::Fresh
    }
}

pub fn retrain_schedule_check(model: &TreeEnsemble, today: NaiveDate) -> Result<Freshness, AlertError> {
    let trained_on = model.trained_on.ok_or(AlertError::MissingTrainingDate)?;
    Ok(freshness(trained_on, today))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub red: u64,
    pub yellow: u64,
    pub white: u64,
}

impl TierCounts {
    pub fn add(&mut self, tier: Tier) {
        match tier {
            Tier::Red => self.red += 1,
            Tier::Yellow => self.yellow += 1,
            Tier::White => self.white += 1,
        }
    }

    pub fn alerts(&self) -> u64 {
        self.red + self.yellow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfSummary {
    pub thresholds: TierThresholds,
    pub counts: TierCounts,
    pub n_days: usize,
    /// Red or Yellow counted as an alert.
    pub alert: ThresholdMetrics,
    /// Red alone counted as an alert.
    pub red_only: ThresholdMetrics,
    /// Mean Red + Yellow count per run date.
    pub daily_alert_volume: f64,
}

/// Re-tiers stored alerts under `candidate` and scores the result against
/// observed outcomes. Stored records are not modified.
pub fn threshold_whatif(
    history: &[(AlertRecord, u8)],
    candidate: &TierThresholds,
) -> Result<WhatIfSummary, AlertError> {
    candidate.validate()?;
    if history.is_empty() {
        return Err(AlertError::EmptyHistory);
    }
    let mut counts = TierCounts::default();
    let mut alert = [0u64; 4];
    let mut red = [0u64; 4];
    let mut dates = BTreeSet::new();
    for (record, label) in history {
        let tier = assign_tier(record.risk, record.risk_prev1, candidate);
        counts.add(tier);
        dates.insert(record.patient_day.date);
        let cell = |flagged: bool| usize::from(flagged) * 2 + usize::from(*label == 1);
        alert[cell(tier.is_alert())] += 1;
        red[cell(tier == Tier::Red)] += 1;
    }
    // Index layout: [tn, fn, fp, tp].
    let metrics = |c: [u64; 4], t: f64| ThresholdMetrics::from_counts(t, c[3], c[2], c[0], c[1]);
    Ok(WhatIfSummary {
        thresholds: *candidate,
        counts,
        n_days: dates.len(),
        alert: metrics(alert, candidate.yellow_level),
        red_only: metrics(red, candidate.red_level),
        daily_alert_volume: counts.alerts() as f64 / dates.len() as f64,
    })
}

/// Pairs stored alerts with their observed outcome. Alerts whose stay is not
/// in `stays` are skipped.
pub fn label_alerts(alerts: &[AlertRecord], stays: &[PatientStay]) -> Vec<(AlertRecord, u8)> {
    let by_id: HashMap<&str, &PatientStay> = stays.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    alerts
        .iter()
        .filter_map(|a| {
            let stay = by_id.get(a.patient_day.patient_id.as_str())?;
            Some((a.clone(), label_day(stay, &a.patient_day)))
        })
        .collect()
}
