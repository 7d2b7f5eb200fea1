//! Cohort record files and integrity checks.
//!
//! A cohort file holds one JSON object per line, one line per stay (see
//! `docs/cohort_format.md`). Parsing is lenient at the record level: a vital
//! with an unreadable timestamp is dropped and counted, its stay survives.
//! A line that is not a stay at all is counted as malformed. When more than
//! half of the lines are malformed the file is assumed to be the wrong file.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cohort::{
    AlcoholUse, DiagnosisRecord, IcuInterval, Location, MedAction, Measurement, MedicationOrder,
    OutcomeEvent, OutcomeKind, PatientDayKey, PatientStay, Route, TabularStatics,
};
use crate::time::parse_timestamp;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{malformed} of {lines} lines are malformed; refusing to treat this as a cohort file")]
    Corpus { malformed: usize, lines: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropReason {
    OutsideAdmissionWindow,
    BadTimestamp,
    NonFiniteValue,
    InvalidField,
    AfterDataCut,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub lines_read: usize,
    pub malformed_lines: usize,
    pub stays_parsed: usize,
    pub records_read: usize,
    pub records_kept: usize,
    pub records_dropped: BTreeMap<DropReason, usize>,
    pub leakage_violations: usize,
}

impl IntegrityReport {
    pub fn total_dropped(&self) -> usize {
        self.records_dropped.values().sum()
    }

    fn drop(&mut self, reason: DropReason) {
        *self.records_dropped.entry(reason).or_insert(0) += 1;
    }

    /// `records_read == records_kept + Σ dropped`.
    pub fn is_balanced(&self) -> bool {
        self.records_read == self.records_kept + self.total_dropped()
    }
}

pub fn parse_cohort_file(path: &Path) -> Result<(Vec<PatientStay>, IntegrityReport), IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cohort_reader(BufReader::new(file)).map_err(|e| match e {
        IngestError::Io { source, .. } => IngestError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn parse_cohort_reader<R: BufRead>(
    reader: R,
) -> Result<(Vec<PatientStay>, IntegrityReport), IngestError> {
    let mut report = IntegrityReport::default();
    let mut stays = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|source| IngestError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines_read += 1;
        match parse_stay_line(&line, &mut report) {
            Some(stay) => {
                report.stays_parsed += 1;
                stays.push(stay);
            }
            None => report.malformed_lines += 1,
        }
    }
    if report.malformed_lines * 2 > report.lines_read {
        return Err(IngestError::Corpus {
            malformed: report.malformed_lines,
            lines: report.lines_read,
        });
    }
    Ok((stays, report))
}

pub fn write_cohort<W: Write>(writer: W, stays: &[PatientStay]) -> io::Result<()> {
    let mut writer = BufWriter::new(writer);
    for stay in stays {
        serde_json::to_writer(&mut writer, stay)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_cohort_file(path: &Path, stays: &[PatientStay]) -> io::Result<()> {
    write_cohort(File::create(path)?, stays)
}

fn opt_ts(value: Option<&Value>) -> Option<NaiveDateTime> {
    value.and_then(Value::as_str).and_then(parse_timestamp)
}

fn nonempty_str(obj: &Map<String, Value>, field: &str) -> Option<String> {
    obj.get(field)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn parse_statics(value: &Value) -> Option<TabularStatics> {
    let obj = value.as_object()?;
    let age = obj.get("age")?.as_f64().filter(|a| a.is_finite() && *a >= 0.0)?;
    let alcohol_user = match obj.get("alcohol_user")?.as_str()?.parse::<AlcoholUse>() {
        Ok(level) => level,
        Err(e) => {
            log::warn!("{e}");
            return None;
        }
    };
    let dnr_order = obj.get("dnr_order")?.as_bool()?;
    let future_surgery_date = obj
        .get("future_surgery_date")
        .and_then(Value::as_str)
        .and_then(|s| NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok());
    let admitting_ward = nonempty_str(obj, "admitting_ward")?;
    Some(TabularStatics {
        age,
        alcohol_user,
        dnr_order,
        future_surgery_date,
        admitting_ward,
    })
}

/// What became of one record.
enum Parsed<T> {
    Keep(T),
    Drop(DropReason),
}

fn record_ts(obj: &Map<String, Value>, field: &str) -> Result<NaiveDateTime, DropReason> {
    obj.get(field)
        .and_then(Value::as_str)
        .and_then(parse_timestamp)
        .ok_or(DropReason::BadTimestamp)
}

fn enum_field<T: for<'de> Deserialize<'de>>(obj: &Map<String, Value>, field: &str) -> Result<T, DropReason> {
    obj.get(field)
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or(DropReason::InvalidField)
}

fn parse_measurement(value: &Value) -> Result<Measurement, DropReason> {
    let obj = value.as_object().ok_or(DropReason::InvalidField)?;
    let name = nonempty_str(obj, "name").ok_or(DropReason::InvalidField)?;
    let value = obj
        .get("value")
        .and_then(Value::as_f64)
        .filter(|v| v.is_finite())
        .ok_or(DropReason::NonFiniteValue)?;
    let ts = record_ts(obj, "ts")?;
    Ok(Measurement { name, value, ts })
}

fn parse_medication(value: &Value) -> Result<MedicationOrder, DropReason> {
    let obj = value.as_object().ok_or(DropReason::InvalidField)?;
    let name = nonempty_str(obj, "name").ok_or(DropReason::InvalidField)?;
    let dose = obj.get("dose").and_then(Value::as_str).unwrap_or("").to_string();
    let route: Route = enum_field(obj, "route")?;
    let action: MedAction = enum_field(obj, "action")?;
    let ts = record_ts(obj, "ts")?;
    Ok(MedicationOrder { name, dose, route, action, ts })
}

fn parse_diagnosis(value: &Value) -> Result<DiagnosisRecord, DropReason> {
    let obj = value.as_object().ok_or(DropReason::InvalidField)?;
    let code = nonempty_str(obj, "code").ok_or(DropReason::InvalidField)?;
    let description = obj
        .get("description")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let ts = record_ts(obj, "ts")?;
    Ok(DiagnosisRecord { code, description, ts })
}

fn parse_event(value: &Value) -> Result<OutcomeEvent, DropReason> {
    let obj = value.as_object().ok_or(DropReason::InvalidField)?;
    let kind: OutcomeKind = enum_field(obj, "kind")?;
    let ts = record_ts(obj, "ts")?;
    Ok(OutcomeEvent { kind, ts })
}

fn parse_icu(value: &Value) -> Result<IcuInterval, DropReason> {
    let obj = value.as_object().ok_or(DropReason::InvalidField)?;
    let start = record_ts(obj, "start")?;
    let end = record_ts(obj, "end")?;
    if end < start {
        return Err(DropReason::InvalidField);
    }
    Ok(IcuInterval { start, end })
}

/// Parses one array field, dropping bad records and those outside the stay window.
fn collect_records<T>(
    obj: &Map<String, Value>,
    field: &str,
    report: &mut IntegrityReport,
    parse: impl Fn(&Value) -> Result<T, DropReason>,
    in_window: impl Fn(&T) -> bool,
) -> Option<Vec<T>> {
    let items = match obj.get(field) {
        None | Some(Value::Null) => return Some(Vec::new()),
        Some(Value::Array(items)) => items,
        Some(_) => return None,
    };
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        report.records_read += 1;
        let parsed = match parse(item) {
            Ok(rec) if in_window(&rec) => Parsed::Keep(rec),
            Ok(_) => Parsed::Drop(DropReason::OutsideAdmissionWindow),
            Err(reason) => Parsed::Drop(reason),
        };
        match parsed {
            Parsed::Keep(rec) => {
                report.records_kept += 1;
                out.push(rec);
            }
            Parsed::Drop(reason) => report.drop(reason),
        }
    }
    Some(out)
}

fn parse_stay_line(line: &str, report: &mut IntegrityReport) -> Option<PatientStay> {
    let value: Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    let patient_id = nonempty_str(obj, "patient_id")?;
    let statics = parse_statics(obj.get("statics")?)?;
    let location = match obj.get("location") {
        None | Some(Value::Null) => Location::default(),
        Some(v) => serde_json::from_value(v.clone()).ok()?,
    };
    let admission_ts = opt_ts(obj.get("admission_ts"));
    let discharge_ts = opt_ts(obj.get("discharge_ts"));

    // Structural failures in any record array make the whole line malformed;
    // record-level counts are staged so a rejected line leaves no trace.
    let mut staged = IntegrityReport::default();
    let window = |ts: NaiveDateTime| match admission_ts {
        None => true,
        Some(adm) => ts >= adm && discharge_ts.map_or(true, |dis| ts <= dis),
    };
    let vitals = collect_records(obj, "vitals", &mut staged, parse_measurement, |m| window(m.ts))?;
    let labs = collect_records(obj, "labs", &mut staged, parse_measurement, |m| window(m.ts))?;
    let medications =
        collect_records(obj, "medications", &mut staged, parse_medication, |m| window(m.ts))?;
    let diagnoses =
        collect_records(obj, "diagnoses", &mut staged, parse_diagnosis, |d| window(d.ts))?;
    let in_icu_intervals = collect_records(obj, "in_icu_intervals", &mut staged, parse_icu, |iv| {
        window(iv.start) && window(iv.end)
    })?;
    // Out-of-window outcome events are kept: the cohort filter rejects their stay.
    let outcome_events = collect_records(obj, "outcome_events", &mut staged, parse_event, |_| true)?;

    report.records_read += staged.records_read;
    report.records_kept += staged.records_kept;
    for (reason, n) in staged.records_dropped {
        *report.records_dropped.entry(reason).or_insert(0) += n;
    }

    let mut stay = PatientStay {
        patient_id,
        admission_ts,
        discharge_ts,
        location,
        in_icu_intervals,
        vitals,
        labs,
        medications,
        diagnoses,
        statics,
        outcome_events,
    };
    stay.sort_records();
    Some(stay)
}

/// A record is usable for a day's features iff it was charted at or before the day's cut.
pub fn eligible_for(ts: NaiveDateTime, day: &PatientDayKey) -> bool {
    ts <= day.cut()
}

/// Checks that no feature record is visible beyond the data horizon of its stay.
///
/// The horizon of a discharged stay is its discharge time. A stay without a
/// discharge time is an open stay in a scoring snapshot: its horizon is the
/// latest cut among `day_keys` for that stay, and anything charted later is
/// future data. Violating records are counted and removed from the returned
/// stays. Stays without keys and without a discharge time are left untouched.
pub fn leakage_audit(
    stays: &[PatientStay],
    day_keys: &[PatientDayKey],
) -> (Vec<PatientStay>, IntegrityReport) {
    let mut latest_cut: HashMap<&str, NaiveDateTime> = HashMap::new();
    for key in day_keys {
        let cut = key.cut();
        latest_cut
            .entry(key.patient_id.as_str())
            .and_modify(|c| *c = (*c).max(cut))
            .or_insert(cut);
    }
    let mut report = IntegrityReport::default();
    let mut cleaned = Vec::with_capacity(stays.len());
    for stay in stays {
        let mut stay = stay.clone();
        let horizon = stay
            .discharge_ts
            .or_else(|| latest_cut.get(stay.patient_id.as_str()).copied());
        let n_records = stay.feature_timestamps().count();
        report.records_read += n_records;
        if let Some(horizon) = horizon {
            stay.vitals.retain(|m| m.ts <= horizon);
            stay.labs.retain(|m| m.ts <= horizon);
            stay.medications.retain(|m| m.ts <= horizon);
            stay.diagnoses.retain(|d| d.ts <= horizon);
        }
        let kept = stay.feature_timestamps().count();
        let violations = n_records - kept;
        report.records_kept += kept;
        report.leakage_violations += violations;
        if violations > 0 {
            *report.records_dropped.entry(DropReason::AfterDataCut).or_insert(0) += violations;
            log::warn!(
                "{}: {violations} record(s) charted after the data cut were excluded",
                stay.patient_id
            );
        }
        cleaned.push(stay);
    }
    (cleaned, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::{bare_stay, ts};
    use crate::cohort::{generate_cohort, CohortConfig};

    fn lines(stays: &[PatientStay]) -> Vec<String> {
        stays.iter().map(|s| serde_json::to_string(s).unwrap()).collect()
    }

    fn cohort(n: usize) -> Vec<PatientStay> {
        generate_cohort(&CohortConfig {
            n_patients: n,
            invalid_fraction: 0.0,
            ..CohortConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn well_formed_file_parses_without_drops() {
        let stays = cohort(10);
        let text = lines(&stays).join("\n");
        let (parsed, report) = parse_cohort_reader(text.as_bytes()).unwrap();
        assert_eq!(parsed, stays);
        assert_eq!(report.malformed_lines, 0);
        assert_eq!(report.total_dropped(), 0);
        assert!(report.is_balanced());
    }

    #[test]
    fn truncated_line_is_skipped() {
        let stays = cohort(10);
        let mut text = lines(&stays);
        let cut = text[4].len() / 2;
        text[4].truncate(cut);
        let (parsed, report) = parse_cohort_reader(text.join("\n").as_bytes()).unwrap();
        assert_eq!(parsed.len(), 9);
        assert_eq!(report.malformed_lines, 1);
    }

    #[test]
    fn mostly_garbage_is_a_corpus_error() {
        let stays = cohort(2);
        let mut text = lines(&stays);
        text.extend(["not json".to_string(), "{}".into(), "[1,2]".into()]);
        let err = parse_cohort_reader(text.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::Corpus { malformed: 3, lines: 5 }));
    }

    #[test]
    fn lab_before_admission_is_dropped() {
        let mut stay = bare_stay("a", "2022-01-01 08:00", "2022-01-04 08:00");
        stay.labs.push(Measurement {
            name: "potassium".into(),
            value: 4.0,
            ts: ts("2021-12-31 06:00"),
        });
        stay.labs.push(Measurement {
            name: "potassium".into(),
            value: 4.2,
            ts: ts("2022-01-02 06:00"),
        });
        let text = serde_json::to_string(&stay).unwrap();
        let (parsed, report) = parse_cohort_reader(text.as_bytes()).unwrap();
        assert_eq!(parsed[0].labs.len(), 1);
        assert_eq!(report.records_dropped[&DropReason::OutsideAdmissionWindow], 1);
        assert!(report.is_balanced());
    }

    #[test]
    fn bad_record_timestamp_drops_record_not_stay() {
        let stay = bare_stay("a", "2022-01-01 08:00", "2022-01-04 08:00");
        let mut value = serde_json::to_value(&stay).unwrap();
        value["vitals"] = serde_json::json!([
            {"name": "heart_rate", "value": 80.0, "ts": "2022-01-02 25:00"},
            {"name": "heart_rate", "value": 82.0, "ts": "2022-01-02T10:00:30"},
            {"name": "heart_rate", "value": null, "ts": "2022-01-02 11:00"},
            {"name": "", "value": 1.0, "ts": "2022-01-02 11:00"}
        ]);
        let (parsed, report) = parse_cohort_reader(value.to_string().as_bytes()).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].vitals.len(), 1);
        assert_eq!(parsed[0].vitals[0].ts, ts("2022-01-02 10:00"));
        assert_eq!(report.records_dropped[&DropReason::BadTimestamp], 1);
        assert_eq!(report.records_dropped[&DropReason::NonFiniteValue], 1);
        assert_eq!(report.records_dropped[&DropReason::InvalidField], 1);
        assert!(report.is_balanced());
    }

    #[test]
    fn unknown_alcohol_level_makes_line_malformed() {
        let stays = cohort(3);
        let mut value = serde_json::to_value(&stays[0]).unwrap();
        value["statics"]["alcohol_user"] = "weekends".into();
        let mut text = lines(&stays);
        text[0] = value.to_string();
        let (parsed, report) = parse_cohort_reader(text.join("\n").as_bytes()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(report.malformed_lines, 1);
    }

    #[test]
    fn missing_admission_survives_parsing() {
        let mut stay = bare_stay("a", "2022-01-01 08:00", "2022-01-04 08:00");
        stay.admission_ts = None;
        let text = serde_json::to_string(&stay).unwrap();
        let (parsed, _) = parse_cohort_reader(text.as_bytes()).unwrap();
        assert_eq!(parsed[0].admission_ts, None);
    }

    #[test]
    fn unreadable_path_is_io_error() {
        let err = parse_cohort_file(Path::new("/nonexistent/cohort.ndjson")).unwrap_err();
        assert!(matches!(err, IngestError::Io { .. }));
    }

    #[test]
    fn cut_boundary_eligibility() {
        let day = PatientDayKey::new("a", NaiveDate::from_ymd_opt(2022, 1, 2).unwrap());
        let next = PatientDayKey::new("a", NaiveDate::from_ymd_opt(2022, 1, 3).unwrap());
        assert!(eligible_for(ts("2022-01-02 23:58"), &day));
        assert!(eligible_for(ts("2022-01-02 23:59"), &day));
        assert!(!eligible_for(ts("2022-01-03 00:01"), &day));
        assert!(eligible_for(ts("2022-01-03 00:01"), &next));
    }

    #[test]
    fn audit_of_generated_cohort_is_clean() {
        let stays = cohort(50);
        let keys: Vec<_> = stays.iter().flat_map(crate::cohort::enumerate_patient_days).collect();
        let (cleaned, report) = leakage_audit(&stays, &keys);
        assert_eq!(cleaned, stays);
        assert_eq!(report.leakage_violations, 0);
        assert!(report.is_balanced());
    }

    #[test]
    fn audit_flags_future_record_in_open_stay() {
        let mut stay = bare_stay("a", "2022-01-01 08:00", "2022-01-04 08:00");
        stay.discharge_ts = None;
        stay.labs.push(Measurement {
            name: "lactate".into(),
            value: 1.1,
            ts: ts("2022-01-02 06:00"),
        });
        stay.labs.push(Measurement {
            name: "lactate".into(),
            value: 9.9,
            ts: ts("2022-01-03 06:00"),
        });
        let key = PatientDayKey::new("a", NaiveDate::from_ymd_opt(2022, 1, 2).unwrap());
        let (cleaned, report) = leakage_audit(&[stay], &[key]);
        assert_eq!(report.leakage_violations, 1);
        assert_eq!(cleaned[0].labs.len(), 1);
        assert_eq!(cleaned[0].labs[0].value, 1.1);
    }
}
