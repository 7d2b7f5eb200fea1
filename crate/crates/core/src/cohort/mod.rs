//! Hospital-stay data model, cohort inclusion rules, patient-day enumeration
//! and next-24h outcome labels.
//!
//! One [`PatientStay`] is one admission. Each calendar day of the stay that
//! ends with the patient on a non-ICU ward becomes a [`PatientDayKey`]; the
//! day's data are frozen at 23:59 and the label looks at the following 24h.

mod synth;

pub use synth::{
    generate_cohort, CohortConfig, DIAGNOSIS_CATALOGUE, GREEN_MEDICATIONS, NEUTRAL_MEDICATIONS,
    WARDS, YELLOW_MEDICATIONS,
};

use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{day_cut, opt_ts_serde, ts_serde};

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("unknown level {level:?} for categorical field `{field}`")]
    UnknownLevel { field: &'static str, level: String },
    #[error("invalid patient-day key {0:?} (expected <patient_id>@<YYYY-MM-DD>)")]
    BadKey(String),
}

/// A vital sign or lab measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    #[serde(with = "ts_serde")]
    pub ts: NaiveDateTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Intravenous,
    Oral,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedAction {
    Started,
    Continued,
    Discontinued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationOrder {
    pub name: String,
    pub dose: String,
    pub route: Route,
    pub action: MedAction,
    #[serde(with = "ts_serde")]
    pub ts: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub code: String,
    pub description: String,
    #[serde(with = "ts_serde")]
    pub ts: NaiveDateTime,
}

/// Alcohol use, ordered so that a higher code means higher risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlcoholUse {
    None,
    Former,
    Current,
}

impl AlcoholUse {
    pub fn code(self) -> f64 {
        match self {
            AlcoholUse::None => 0.0,
            AlcoholUse::Former => 1.0,
            AlcoholUse::Current => 2.0,
        }
    }
}

impl FromStr for AlcoholUse {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(AlcoholUse::None),
            "former" => Ok(AlcoholUse::Former),
            "current" => Ok(AlcoholUse::Current),
            _ => Err(CohortError::UnknownLevel {
                field: "alcohol_user",
                level: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularStatics {
    pub age: f64,
    pub alcohol_user: AlcoholUse,
    pub dnr_order: bool,
    /// Scheduled surgery date; encoded as signed days from the scored day.
    pub future_surgery_date: Option<NaiveDate>,
    pub admitting_ward: String,
}

/// Where the patient sits, for display on the triage list.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Location {
    pub department: String,
    pub room: String,
    pub bed: String,
    pub service: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeKind {
    #[serde(rename = "RRT")]
    Rrt,
    CardiacAlert,
    #[serde(rename = "AnesthesiaSTAT")]
    AnesthesiaStat,
    #[serde(rename = "DART")]
    Dart,
    #[serde(rename = "ICUAdmission")]
    IcuAdmission,
    Mortality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEvent {
    pub kind: OutcomeKind,
    #[serde(with = "ts_serde")]
    pub ts: NaiveDateTime,
}

/// Half-open ICU residence interval `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcuInterval {
    #[serde(with = "ts_serde")]
    pub start: NaiveDateTime,
    #[serde(with = "ts_serde")]
    pub end: NaiveDateTime,
}

impl IcuInterval {
    pub fn contains(&self, ts: NaiveDateTime) -> bool {
        self.start <= ts && ts < self.end
    }
}

/// One hospital admission with all of its raw event streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientStay {
    pub patient_id: String,
    #[serde(with = "opt_ts_serde")]
    pub admission_ts: Option<NaiveDateTime>,
    #[serde(with = "opt_ts_serde")]
    pub discharge_ts: Option<NaiveDateTime>,
    pub location: Location,
    pub in_icu_intervals: Vec<IcuInterval>,
    pub vitals: Vec<Measurement>,
    pub labs: Vec<Measurement>,
    pub medications: Vec<MedicationOrder>,
    pub diagnoses: Vec<DiagnosisRecord>,
    pub statics: TabularStatics,
    pub outcome_events: Vec<OutcomeEvent>,
}

impl PatientStay {
    /// Whether `ts` lies inside `[admission, discharge]` (open-ended when not discharged).
    pub fn in_window(&self, ts: NaiveDateTime) -> bool {
        match self.admission_ts {
            None => false,
            Some(adm) => ts >= adm && self.discharge_ts.map_or(true, |dis| ts <= dis),
        }
    }

    pub fn in_icu_at(&self, ts: NaiveDateTime) -> bool {
        self.in_icu_intervals.iter().any(|iv| iv.contains(ts))
    }

    /// Whether the patient is admitted and not yet discharged at `ts`.
    pub fn present_at(&self, ts: NaiveDateTime) -> bool {
        match self.admission_ts {
            None => false,
            Some(adm) => adm <= ts && self.discharge_ts.map_or(true, |dis| ts < dis),
        }
    }

    /// Timestamps of every feature-bearing record (vitals, labs, medications, diagnoses).
    pub fn feature_timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        self.vitals
            .iter()
            .map(|m| m.ts)
            .chain(self.labs.iter().map(|m| m.ts))
            .chain(self.medications.iter().map(|m| m.ts))
            .chain(self.diagnoses.iter().map(|d| d.ts))
    }

    /// Drops every feature record and outcome event strictly after `ts`.
    pub fn retain_up_to(&mut self, ts: NaiveDateTime) {
        self.vitals.retain(|m| m.ts <= ts);
        self.labs.retain(|m| m.ts <= ts);
        self.medications.retain(|m| m.ts <= ts);
        self.diagnoses.retain(|d| d.ts <= ts);
        self.outcome_events.retain(|e| e.ts <= ts);
    }

    /// Sorts every record stream chronologically (stable).
    pub fn sort_records(&mut self) {
        self.vitals.sort_by_key(|m| m.ts);
        self.labs.sort_by_key(|m| m.ts);
        self.medications.sort_by_key(|m| m.ts);
        self.diagnoses.sort_by_key(|d| d.ts);
        self.outcome_events.sort_by_key(|e| e.ts);
        self.in_icu_intervals.sort_by_key(|iv| iv.start);
    }
}

/// One scored unit: a patient's stay on one calendar day.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatientDayKey {
    pub patient_id: String,
    pub date: NaiveDate,
}

impl PatientDayKey {
    pub fn new(patient_id: impl Into<String>, date: NaiveDate) -> Self {
        PatientDayKey {
            patient_id: patient_id.into(),
            date,
        }
    }

    /// The 23:59 data cut for this day.
    pub fn cut(&self) -> NaiveDateTime {
        day_cut(self.date)
    }

    /// Stable 64-bit identity, independent of row order.
    pub fn stable_id(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Display for PatientDayKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.patient_id, self.date.format("%Y-%m-%d"))
    }
}

impl FromStr for PatientDayKey {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (id, date) = s
            .rsplit_once('@')
            .ok_or_else(|| CohortError::BadKey(s.to_string()))?;
        let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
            .map_err(|_| CohortError::BadKey(s.to_string()))?;
        if id.is_empty() {
            return Err(CohortError::BadKey(s.to_string()));
        }
        Ok(PatientDayKey::new(id, date))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    MissingAdmission,
    ShortStay,
    EventOutsideWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub patient_id: String,
    pub reason: RejectReason,
}

/// Minimum length of stay for inclusion.
pub const MIN_STAY: Duration = Duration::hours(24);

fn rejection_reason(stay: &PatientStay) -> Option<RejectReason> {
    let Some(admission) = stay.admission_ts else {
        return Some(RejectReason::MissingAdmission);
    };
    if let Some(discharge) = stay.discharge_ts {
        if discharge - admission < MIN_STAY {
            return Some(RejectReason::ShortStay);
        }
    }
    if stay.outcome_events.iter().any(|e| !stay.in_window(e.ts)) {
        return Some(RejectReason::EventOutsideWindow);
    }
    None
}

/// Splits stays into those meeting the inclusion rules and those rejected,
/// each rejection tagged with the first rule it failed.
pub fn apply_cohort_filters(
    stays: Vec<PatientStay>,
) -> (Vec<PatientStay>, Vec<(PatientStay, RejectReason)>) {
    let mut kept = Vec::with_capacity(stays.len());
    let mut rejected = Vec::new();
    for stay in stays {
        match rejection_reason(&stay) {
            None => kept.push(stay),
            Some(reason) => rejected.push((stay, reason)),
        }
    }
    (kept, rejected)
}

/// Calendar days from the admission date up to (not including) the discharge
/// date, skipping days whose 23:59 cut falls inside an ICU interval.
///
/// Stays without a discharge time have no complete follow-up window and yield
/// no keys; use [`enumerate_patient_days_through`] to score an open stay.
pub fn enumerate_patient_days(stay: &PatientStay) -> Vec<PatientDayKey> {
    match (stay.admission_ts, stay.discharge_ts) {
        (Some(_), Some(discharge)) => {
            let last = discharge.date() - Duration::days(1);
            enumerate_patient_days_through(stay, last)
        }
        _ => Vec::new(),
    }
}

/// Like [`enumerate_patient_days`] but bounded by `last` instead of the
/// discharge date. A day is kept only if the patient is present on a non-ICU
/// ward at its cut.
pub fn enumerate_patient_days_through(stay: &PatientStay, last: NaiveDate) -> Vec<PatientDayKey> {
    let Some(admission) = stay.admission_ts else {
        return Vec::new();
    };
    let mut keys = Vec::new();
    let mut date = admission.date();
    while date <= last {
        let cut = day_cut(date);
        if stay.present_at(cut) && !stay.in_icu_at(cut) {
            keys.push(PatientDayKey::new(stay.patient_id.clone(), date));
        }
        date += Duration::days(1);
    }
    keys
}

/// 1 iff any outcome event occurs in `(cut, cut + 24h]`.
pub fn label_day(stay: &PatientStay, day: &PatientDayKey) -> u8 {
    let cut = day.cut();
    let horizon = cut + Duration::hours(24);
    u8::from(stay.outcome_events.iter().any(|e| e.ts > cut && e.ts <= horizon))
}
