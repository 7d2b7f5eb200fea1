use std::collections::{BTreeMap, HashMap};

use chrono::{Datelike, NaiveDate, NaiveDateTime};

use super::FeatureError;
use crate::cohort::{PatientStay, TabularStatics};
use crate::time::day_cut;

pub const TABULAR_NAMES: [&str; 8] = [
    "age",
    "alcohol_user",
    "dnr_order",
    "future_surgery_days",
    "day_of_week",
    "ward_census",
    "hospital_admissions",
    "days_since_admission",
];

/// Non-patient-specific variables for one (ward, day), plus the length of
/// stay so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperationalContext {
    pub date: NaiveDate,
    /// Patients on the ward at the day's 23:59 cut.
    pub ward_census: f64,
    /// Admissions to the hospital dated that day.
    pub hospital_admissions: f64,
    pub days_since_admission: f64,
}

/// Per-ward end-of-day census and per-day admission counts over a set of stays.
#[derive(Debug, Clone, Default)]
pub struct OperationalStats {
    census: HashMap<(String, NaiveDate), u32>,
    /// Admission times of stays without a discharge, by ward.
    open: HashMap<String, Vec<NaiveDateTime>>,
    admissions: BTreeMap<NaiveDate, u32>,
}

impl OperationalStats {
    /// Counts every stay with an admission time. Open stays count as present
    /// at every cut after admission, so queries should not pass the data cut.
    pub fn from_stays(stays: &[PatientStay]) -> Self {
        let mut stats = OperationalStats::default();
        for stay in stays {
            let Some(admission) = stay.admission_ts else {
                continue;
            };
            *stats.admissions.entry(admission.date()).or_default() += 1;
            let ward = &stay.statics.admitting_ward;
            let Some(end) = stay.discharge_ts else {
                stats.open.entry(ward.clone()).or_default().push(admission);
                continue;
            };
            let mut date = admission.date();
            while day_cut(date) < end {
                if stay.present_at(day_cut(date)) {
                    *stats.census.entry((ward.clone(), date)).or_default() += 1;
                }
                date = date.succ_opt().expect("date in range");
            }
        }
        stats
    }

    pub fn ward_census(&self, ward: &str, date: NaiveDate) -> u32 {
        let cut = day_cut(date);
        let closed = self.census.get(&(ward.to_string(), date)).copied().unwrap_or(0);
        let open = self
            .open
            .get(ward)
            .map_or(0, |adms| adms.iter().filter(|&&a| a <= cut).count() as u32);
        closed + open
    }

    pub fn hospital_admissions(&self, date: NaiveDate) -> u32 {
        self.admissions.get(&date).copied().unwrap_or(0)
    }

    pub fn context(&self, stay: &PatientStay, date: NaiveDate) -> OperationalContext {
        let since = stay
            .admission_ts
            .map_or(0, |adm| (date - adm.date()).num_days());
        OperationalContext {
            date,
            ward_census: f64::from(self.ward_census(&stay.statics.admitting_ward, date)),
            hospital_admissions: f64::from(self.hospital_admissions(date)),
            days_since_admission: since as f64,
        }
    }
}

/// Statics and operational context as named values in [`TABULAR_NAMES`] order.
///
/// Alcohol use maps to none=0 < former=1 < current=2, booleans to {0, 1}, the
/// surgery date to signed days after `ctx.date` (`NaN` when absent, for the
/// imputer), and the weekday to Monday=0..Sunday=6.
pub fn encode_tabular(
    statics: &TabularStatics,
    ctx: &OperationalContext,
) -> Result<Vec<(&'static str, f64)>, FeatureError> {
    if !statics.age.is_finite() || statics.age < 0.0 {
        return Err(FeatureError::InvalidValue {
            field: "age",
            value: statics.age.to_string(),
        });
    }
    let surgery = statics
        .future_surgery_date
        .map_or(f64::NAN, |d| (d - ctx.date).num_days() as f64);
    let values = [
        statics.age,
        statics.alcohol_user.code(),
        f64::from(u8::from(statics.dnr_order)),
        surgery,
        f64::from(ctx.date.weekday().num_days_from_monday()),
        ctx.ward_census,
        ctx.hospital_admissions,
        ctx.days_since_admission,
    ];
    Ok(TABULAR_NAMES.into_iter().zip(values).collect())
}

/// Parses an ordered categorical level into its code, naming the field on failure.
pub fn encode_level(field: &'static str, level: &str, levels: &[&str]) -> Result<f64, FeatureError> {
    let wanted = level.trim().to_lowercase();
    levels
        .iter()
        .position(|l| *l == wanted)
        .map(|i| i as f64)
        .ok_or_else(|| FeatureError::UnknownLevel {
            field,
            level: level.to_string(),
        })
}
