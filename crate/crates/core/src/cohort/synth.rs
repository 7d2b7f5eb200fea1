//! Reproducible synthetic cohorts with a planted deterioration signal.
//!
//! Generation runs in three passes: stay windows and static attributes from
//! the master stream, then daily clinical content per stay from a per-stay
//! stream, then outcome draws. Events follow a logistic link over observable
//! drivers (day-average heart rate, minimum SpO2, lactate, DNR, scheduled
//! surgery, ward census, yellow medications, new high-risk diagnoses). The
//! intercept is solved numerically so the expected patient-day event rate
//! equals `base_event_rate` for any `signal_strength`.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    AlcoholUse, CohortError, DiagnosisRecord, IcuInterval, Location, MedAction, Measurement,
    MedicationOrder, OutcomeEvent, OutcomeKind, PatientStay, Route, TabularStatics,
};
use crate::time::day_cut;

/// Intravenous medications whose use marks a sick patient.
pub const GREEN_MEDICATIONS: &[(&str, &str)] = &[
    ("vancomycin", "1 g"),
    ("piperacillin-tazobactam", "4.5 g"),
    ("furosemide", "40 mg"),
    ("heparin", "5000 units"),
];

/// Medications used around procedures, in the ICU or during emergency responses.
pub const YELLOW_MEDICATIONS: &[(&str, &str)] = &[
    ("norepinephrine", "8 mcg/min"),
    ("naloxone", "0.4 mg"),
    ("midazolam", "2 mg"),
    ("amiodarone", "150 mg"),
];

pub const NEUTRAL_MEDICATIONS: &[(&str, &str)] = &[
    ("acetaminophen", "650 mg"),
    ("pantoprazole", "40 mg"),
    ("ondansetron", "4 mg"),
    ("atorvastatin", "20 mg"),
    ("senna", "8.6 mg"),
    ("enoxaparin", "40 mg"),
];

/// `(code, description, high_risk)`.
pub const DIAGNOSIS_CATALOGUE: &[(&str, &str, bool)] = &[
    ("A41.9", "Sepsis, unspecified organism", true),
    ("I50.9", "Heart failure, unspecified", true),
    ("J96.01", "Acute respiratory failure with hypoxia", true),
    ("N17.9", "Acute kidney failure, unspecified", true),
    ("I10", "Essential (primary) hypertension", false),
    ("E11.9", "Type 2 diabetes mellitus without complications", false),
    ("K21.9", "Gastro-esophageal reflux disease without esophagitis", false),
    ("M54.50", "Low back pain, unspecified", false),
    ("J18.9", "Pneumonia, unspecified organism", false),
    ("S72.001A", "Fracture of unspecified part of neck of right femur", false),
];

/// `(department, service)`.
pub const WARDS: &[(&str, &str)] = &[
    ("Medicine", "Hospitalist"),
    ("Surgery", "General Surgery"),
    ("Cardiology", "Cardiology"),
    ("Neurology", "Neurology"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub base_event_rate: f64,
    pub seed: u64,
    /// Multiplier on every planted driver; 0 makes outcomes independent of all features.
    pub signal_strength: f64,
    /// Fraction of stays corrupted so that a cohort filter rejects them.
    pub invalid_fraction: f64,
    /// Maximum charting delay, in minutes, added to vitals and labs.
    pub jitter_minutes: u32,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 2000,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            end_date: NaiveDate::from_ymd_opt(2022, 7, 1).expect("valid date"),
            base_event_rate: 0.05,
            seed: 7,
            signal_strength: 1.0,
            invalid_fraction: 0.03,
            jitter_minutes: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.end_date <= self.start_date + Duration::days(1) {
            return Err(CohortError::Config(format!(
                "date range {}..{} must span at least two days",
                self.start_date, self.end_date
            )));
        }
        if !(self.base_event_rate > 0.0 && self.base_event_rate < 1.0) {
            return Err(CohortError::Config(format!(
                "base_event_rate {} must lie in (0, 1)",
                self.base_event_rate
            )));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return Err(CohortError::Config(format!(
                "signal_strength {} must be finite and non-negative",
                self.signal_strength
            )));
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) {
            return Err(CohortError::Config(format!(
                "invalid_fraction {} must lie in [0, 1)",
                self.invalid_fraction
            )));
        }
        Ok(())
    }
}

struct StayPlan {
    admission: NaiveDateTime,
    discharge: NaiveDateTime,
    ward: usize,
    room: String,
    bed: String,
    frailty: f64,
    statics: TabularStatics,
}

/// Observable drivers of one day, before the signal multiplier and intercept.
struct DayDriver {
    date: NaiveDate,
    linear: f64,
}

struct StayDraft {
    stay: PatientStay,
    drivers: Vec<DayDriver>,
    rng: ChaCha8Rng,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_time_between(rng: &mut ChaCha8Rng, lo: NaiveDateTime, hi: NaiveDateTime) -> NaiveDateTime {
    let span = (hi - lo).num_minutes().max(0);
    lo + Duration::minutes(rng.gen_range(0..=span))
}

/// Generates `config.n_patients` stays. Output is a pure function of the config.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<PatientStay>, CohortError> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let plans: Vec<StayPlan> = (0..config.n_patients)
        .map(|_| plan_stay(&mut master, config))
        .collect();

    let census = ward_census(&plans);
    let census_values: Vec<f64> = census.values().map(|&c| c as f64).collect();
    let (census_mean, census_sd) = mean_sd(&census_values);

    let mut drafts: Vec<StayDraft> = plans
        .into_iter()
        .enumerate()
        .map(|(i, plan)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            draft_stay(i, plan, rng, &census, census_mean, census_sd)
        })
        .collect();

    let intercept = solve_intercept(
        drafts.iter().flat_map(|d| d.drivers.iter().map(|dd| dd.linear)),
        config.signal_strength,
        config.base_event_rate,
    );

    for draft in &mut drafts {
        draw_outcomes(draft, intercept, config.signal_strength);
        if config.jitter_minutes > 0 {
            apply_jitter(draft, config.jitter_minutes);
        }
    }

    let mut stays: Vec<PatientStay> = drafts.into_iter().map(|d| d.stay).collect();
    corrupt_some(&mut stays, &mut master, config.invalid_fraction);
    for stay in &mut stays {
        stay.sort_records();
    }
    Ok(stays)
}

fn plan_stay(rng: &mut ChaCha8Rng, config: &CohortConfig) -> StayPlan {
    let span_days = (config.end_date - config.start_date).num_days() - 1;
    let adm_date = config.start_date + Duration::days(rng.gen_range(0..span_days));
    let admission = adm_date.and_time(NaiveTime::MIN) + Duration::minutes(rng.gen_range(0..1440));
    // Stays last at least a day; most last two to seven.
    let extra_hours = (normal(rng) * 0.6 + 72f64.ln()).exp().min(480.0);
    let discharge = admission + Duration::minutes(((26.0 + extra_hours) * 60.0) as i64);

    let frailty = normal(rng);
    let ward = rng.gen_range(0..WARDS.len());
    let age = (62.0 + 10.0 * frailty + 12.0 * normal(rng)).clamp(18.0, 100.0).round();
    let alcohol_draw: f64 = rng.gen();
    let alcohol_user = if alcohol_draw < 0.6 {
        AlcoholUse::None
    } else if alcohol_draw < 0.8 {
        AlcoholUse::Former
    } else {
        AlcoholUse::Current
    };
    let dnr_order = rng.gen_bool(sigmoid(-2.4 + 0.8 * frailty + 0.04 * (age - 65.0)));
    let stay_days = (discharge.date() - admission.date()).num_days();
    let future_surgery_date = if stay_days >= 1 && rng.gen_bool(0.3) {
        Some(admission.date() + Duration::days(rng.gen_range(1..=stay_days)))
    } else {
        None
    };
    let (department, _) = WARDS[ward];
    let room = format!("{}{:03}", &department[..1], rng.gen_range(100..140));
    let bed = ["A", "B"][rng.gen_range(0..2)].to_string();
    StayPlan {
        admission,
        discharge,
        ward,
        room,
        bed,
        frailty,
        statics: TabularStatics {
            age,
            alcohol_user,
            dnr_order,
            future_surgery_date,
            admitting_ward: department.to_string(),
        },
    }
}

/// Patients present on each ward at each day's cut.
fn ward_census(plans: &[StayPlan]) -> BTreeMap<(usize, NaiveDate), u32> {
    let mut census = BTreeMap::new();
    for plan in plans {
        let mut date = plan.admission.date();
        while date <= plan.discharge.date() {
            let cut = day_cut(date);
            if plan.admission <= cut && cut < plan.discharge {
                *census.entry((plan.ward, date)).or_insert(0) += 1;
            }
            date += Duration::days(1);
        }
    }
    census
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-9))
}

#[derive(Default)]
struct MedState {
    green: Option<(&'static str, &'static str)>,
    green_used: bool,
    oral: Option<(&'static str, &'static str)>,
    neutral: Vec<(&'static str, &'static str)>,
    yellow_seen: bool,
}

fn draft_stay(
    index: usize,
    plan: StayPlan,
    mut rng: ChaCha8Rng,
    census: &BTreeMap<(usize, NaiveDate), u32>,
    census_mean: f64,
    census_sd: f64,
) -> StayDraft {
    let (department, service) = WARDS[plan.ward];
    let mut stay = PatientStay {
        patient_id: format!("P{index:06}"),
        admission_ts: Some(plan.admission),
        discharge_ts: Some(plan.discharge),
        location: Location {
            department: department.to_string(),
            room: plan.room,
            bed: plan.bed,
            service: service.to_string(),
        },
        in_icu_intervals: Vec::new(),
        vitals: Vec::new(),
        labs: Vec::new(),
        medications: Vec::new(),
        diagnoses: Vec::new(),
        statics: plan.statics,
        outcome_events: Vec::new(),
    };

    let frailty = plan.frailty;
    let high_risk: Vec<_> = DIAGNOSIS_CATALOGUE.iter().filter(|d| d.2).collect();
    let low_risk: Vec<_> = DIAGNOSIS_CATALOGUE.iter().filter(|d| !d.2).collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut severity = 0.8 * frailty + 0.6 * normal(&mut rng);
    let mut meds = MedState::default();
    let mut drivers = Vec::new();
    let last_key_date = plan.discharge.date() - Duration::days(1);

    let mut date = plan.admission.date();
    let mut day_index = 0;
    while date <= plan.discharge.date() {
        if day_index > 0 {
            severity = 0.7 * severity + 0.3 * frailty + 0.5 * noise.sample(&mut rng);
        }
        let lo = plan.admission.max(date.and_time(NaiveTime::MIN));
        let hi = plan.discharge.min(day_cut(date));
        let covered = (hi - lo).num_minutes() as f64 / 1440.0;

        // Vitals, charted together at a handful of times.
        let n_charts = ((rng.gen_range(3..=6) as f64) * covered).ceil().max(1.0) as usize;
        let mut times: Vec<_> = (0..n_charts)
            .map(|_| random_time_between(&mut rng, lo, hi))
            .collect();
        times.sort();
        let (mut hr_sum, mut hr_n, mut spo2_min) = (0.0, 0usize, f64::INFINITY);
        for ts in times {
            let hr = (78.0 + 10.0 * severity + 6.0 * normal(&mut rng)).max(30.0);
            let spo2 = (96.5 - 1.8 * severity + 1.2 * normal(&mut rng)).clamp(70.0, 100.0);
            let sbp = (122.0 - 9.0 * severity + 10.0 * normal(&mut rng)).max(50.0);
            let rr = (16.0 + 2.0 * severity + 2.0 * normal(&mut rng)).max(6.0);
            let temp = 36.9 + 0.35 * severity + 0.3 * normal(&mut rng);
            for (name, value) in [
                ("heart_rate", hr),
                ("sbp", sbp),
                ("spo2", spo2),
                ("resp_rate", rr),
                ("temperature", temp),
            ] {
                if rng.gen_bool(0.92) {
                    let value = (value * 10.0).round() / 10.0;
                    stay.vitals.push(Measurement { name: name.into(), value, ts });
                    match name {
                        "heart_rate" => {
                            hr_sum += value;
                            hr_n += 1;
                        }
                        "spo2" => spo2_min = spo2_min.min(value),
                        _ => {}
                    }
                }
            }
        }

        // Morning labs.
        let mut lactate = None;
        let lab_ts = date.and_hms_opt(6, 0, 0).expect("valid time");
        if lab_ts >= lo && lab_ts <= hi && rng.gen_bool(0.8) {
            let k = 4.1 + 0.25 * severity + 0.3 * normal(&mut rng);
            let cr = (1.0 + 0.25 * severity + 0.2 * normal(&mut rng)).max(0.3);
            let lac = (1.3 + 0.5 * severity + 0.4 * normal(&mut rng)).max(0.3);
            for (name, value) in [("potassium", k), ("creatinine", cr), ("lactate", lac)] {
                if rng.gen_bool(0.9) {
                    let value = (value * 100.0).round() / 100.0;
                    stay.labs.push(Measurement { name: name.into(), value, ts: lab_ts });
                    if name == "lactate" {
                        lactate = Some(value);
                    }
                }
            }
        }

        let (yellow_today, green_after_yellow) =
            draft_medications(&mut stay, &mut meds, &mut rng, severity, day_index, lo, hi);

        // Diagnoses: admission problem list, later new acute problems.
        let mut high_risk_dx = 0.0;
        if day_index == 0 {
            let n_dx = rng.gen_range(1..=3);
            for _ in 0..n_dx {
                let pick = if rng.gen_bool(sigmoid(-1.2 + 0.8 * frailty)) {
                    high_risk[rng.gen_range(0..high_risk.len())]
                } else {
                    low_risk[rng.gen_range(0..low_risk.len())]
                };
                if pick.2 {
                    high_risk_dx = 0.5;
                }
                stay.diagnoses.push(DiagnosisRecord {
                    code: pick.0.into(),
                    description: pick.1.into(),
                    ts: random_time_between(&mut rng, lo, hi),
                });
            }
        } else if rng.gen_bool(sigmoid(-3.2 + 0.9 * severity)) {
            let pick = high_risk[rng.gen_range(0..high_risk.len())];
            high_risk_dx = 1.0;
            stay.diagnoses.push(DiagnosisRecord {
                code: pick.0.into(),
                description: pick.1.into(),
                ts: random_time_between(&mut rng, lo, hi),
            });
        }

        if date <= last_key_date {
            let z_hr = if hr_n > 0 { (hr_sum / hr_n as f64 - 78.0) / 10.0 } else { 0.0 };
            let z_spo2 = if spo2_min.is_finite() { (95.5 - spo2_min) / 2.0 } else { 0.0 };
            let z_lac = lactate.map_or(0.0, |l| (l - 1.3) / 0.6);
            let census_z = census
                .get(&(plan.ward, date))
                .map_or(0.0, |&c| (c as f64 - census_mean) / census_sd);
            let surgery_tomorrow = stay
                .statics
                .future_surgery_date
                .map_or(0.0, |d| f64::from(u8::from(d == date + Duration::days(1))));
            let tabular = 1.1 * f64::from(u8::from(stay.statics.dnr_order))
                + 0.5 * census_z
                + 1.5 * surgery_tomorrow
                + 0.3 * (stay.statics.age - 62.0) / 15.0
                + 0.4 * f64::from(u8::from(stay.statics.alcohol_user == AlcoholUse::Current));
            let timeseries = 0.7 * z_hr + 0.6 * z_spo2 + 0.4 * z_lac;
            let text = 1.2 * yellow_today + 0.6 * green_after_yellow + 0.8 * high_risk_dx;
            drivers.push(DayDriver {
                date,
                linear: tabular + timeseries + text,
            });
        }
        date += Duration::days(1);
        day_index += 1;
    }

    StayDraft { stay, drivers, rng }
}

#[allow(clippy::too_many_arguments)]
fn draft_medications(
    stay: &mut PatientStay,
    meds: &mut MedState,
    rng: &mut ChaCha8Rng,
    severity: f64,
    day_index: usize,
    lo: NaiveDateTime,
    hi: NaiveDateTime,
) -> (f64, f64) {
    let order = |stay: &mut PatientStay,
                     (name, dose): (&str, &str),
                     route: Route,
                     action: MedAction,
                     ts: NaiveDateTime| {
        stay.medications.push(MedicationOrder {
            name: name.into(),
            dose: dose.into(),
            route,
            action,
            ts,
        });
    };

    if day_index == 0 {
        let n = rng.gen_range(1..=2);
        let mut pool = NEUTRAL_MEDICATIONS.to_vec();
        pool.shuffle(rng);
        for &med in pool.iter().take(n) {
            order(stay, med, Route::Oral, MedAction::Started, random_time_between(rng, lo, hi));
            meds.neutral.push(med);
        }
    } else {
        for med in meds.neutral.clone() {
            order(stay, med, Route::Oral, MedAction::Continued, random_time_between(rng, lo, hi));
        }
    }
    if let Some(med) = meds.oral {
        order(stay, med, Route::Oral, MedAction::Continued, random_time_between(rng, lo, hi));
    }

    let mut green_after_yellow = 0.0;
    match meds.green {
        None if !meds.green_used && rng.gen_bool(sigmoid(-2.0 + 1.0 * severity)) => {
            let med = GREEN_MEDICATIONS[rng.gen_range(0..GREEN_MEDICATIONS.len())];
            order(stay, med, Route::Intravenous, MedAction::Started, random_time_between(rng, lo, hi));
            meds.green = Some(med);
            meds.green_used = true;
            if meds.yellow_seen {
                green_after_yellow = 1.0;
            }
        }
        Some(med) if severity < 0.0 && rng.gen_bool(0.5) => {
            let ts = random_time_between(rng, lo, hi);
            order(stay, med, Route::Intravenous, MedAction::Discontinued, ts);
            meds.green = None;
            if rng.gen_bool(0.6) && meds.oral.is_none() {
                order(stay, med, Route::Oral, MedAction::Started, ts);
                meds.oral = Some(med);
            }
        }
        Some(med) => {
            order(stay, med, Route::Intravenous, MedAction::Continued, random_time_between(rng, lo, hi));
            if meds.yellow_seen {
                green_after_yellow = 1.0;
            }
        }
        None => {}
    }

    let mut yellow_today = 0.0;
    if rng.gen_bool(sigmoid(-3.0 + 1.2 * severity)) {
        let med = YELLOW_MEDICATIONS[rng.gen_range(0..YELLOW_MEDICATIONS.len())];
        let start = random_time_between(rng, lo, hi);
        order(stay, med, Route::Intravenous, MedAction::Started, start);
        let stop = start + Duration::minutes(rng.gen_range(30..240));
        order(stay, med, Route::Intravenous, MedAction::Discontinued, stop.min(hi));
        meds.yellow_seen = true;
        yellow_today = 1.0;
    }
    (yellow_today, green_after_yellow)
}

/// Intercept `a` with `mean(sigmoid(a + strength * linear)) = rate`.
fn solve_intercept(linear: impl Iterator<Item = f64>, strength: f64, rate: f64) -> f64 {
    let values: Vec<f64> = linear.map(|l| strength * l).collect();
    if values.is_empty() {
        return (rate / (1.0 - rate)).ln();
    }
    let mean_rate = |a: f64| values.iter().map(|v| sigmoid(a + v)).sum::<f64>() / values.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_kind(rng: &mut ChaCha8Rng) -> OutcomeKind {
    let u: f64 = rng.gen();
    match u {
        u if u < 0.45 => OutcomeKind::Rrt,
        u if u < 0.55 => OutcomeKind::CardiacAlert,
        u if u < 0.60 => OutcomeKind::AnesthesiaStat,
        u if u < 0.65 => OutcomeKind::Dart,
        u if u < 0.90 => OutcomeKind::IcuAdmission,
        _ => OutcomeKind::Mortality,
    }
}

fn admit_to_icu(stay: &mut PatientStay, rng: &mut ChaCha8Rng, start: NaiveDateTime) {
    let discharge = stay.discharge_ts.expect("drafts are discharged");
    let end = (start + Duration::hours(rng.gen_range(24..72))).min(discharge);
    stay.in_icu_intervals.push(IcuInterval { start, end });
}

fn draw_outcomes(draft: &mut StayDraft, intercept: f64, strength: f64) {
    let rng = &mut draft.rng;
    let stay = &mut draft.stay;
    for driver in &draft.drivers {
        let cut = day_cut(driver.date);
        let discharge = stay.discharge_ts.expect("drafts are discharged");
        if cut >= discharge || stay.in_icu_at(cut) {
            continue;
        }
        let p = sigmoid(intercept + strength * driver.linear);
        if !rng.gen_bool(p) {
            continue;
        }
        let room = (discharge - cut).num_minutes().min(1440);
        let ts = cut + Duration::minutes(rng.gen_range(1..=room));
        let kind = draw_kind(rng);
        stay.outcome_events.push(OutcomeEvent { kind, ts });
        match kind {
            OutcomeKind::Mortality => {
                stay.discharge_ts = Some(ts);
                stay.retain_up_to(ts);
                for iv in &mut stay.in_icu_intervals {
                    iv.end = iv.end.min(ts);
                }
                return;
            }
            OutcomeKind::IcuAdmission => admit_to_icu(stay, rng, ts),
            _ => {
                // Some team dispatches escalate to the ICU within the hour.
                let follow = ts + Duration::minutes(rng.gen_range(20..90));
                if rng.gen_bool(0.1) && follow <= cut + Duration::hours(24) && follow < discharge {
                    stay.outcome_events.push(OutcomeEvent {
                        kind: OutcomeKind::IcuAdmission,
                        ts: follow,
                    });
                    admit_to_icu(stay, rng, follow);
                }
            }
        }
    }
}

fn apply_jitter(draft: &mut StayDraft, max_minutes: u32) {
    let discharge = draft.stay.discharge_ts.expect("drafts are discharged");
    let rng = &mut draft.rng;
    for m in draft.stay.vitals.iter_mut().chain(draft.stay.labs.iter_mut()) {
        let delay = Duration::minutes(rng.gen_range(0..=i64::from(max_minutes)));
        m.ts = (m.ts + delay).min(discharge);
    }
}

fn corrupt_some(stays: &mut [PatientStay], rng: &mut ChaCha8Rng, fraction: f64) {
    let n_bad = (fraction * stays.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..stays.len()).collect();
    order.shuffle(rng);
    for (k, &i) in order.iter().take(n_bad).enumerate() {
        let stay = &mut stays[i];
        let admission = stay.admission_ts.expect("generated stays have admissions");
        match k % 3 {
            0 => {
                let discharge = admission + Duration::hours(rng.gen_range(4..20));
                stay.discharge_ts = Some(discharge);
                stay.retain_up_to(discharge);
                stay.in_icu_intervals.retain(|iv| iv.start < discharge);
                for iv in &mut stay.in_icu_intervals {
                    iv.end = iv.end.min(discharge);
                }
            }
            1 => stay.outcome_events.push(OutcomeEvent {
                kind: OutcomeKind::Rrt,
                ts: admission - Duration::minutes(rng.gen_range(30..600)),
            }),
            _ => stay.admission_ts = None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{apply_cohort_filters, enumerate_patient_days, label_day, RejectReason};

    fn small(seed: u64) -> CohortConfig {
        CohortConfig {
            n_patients: 100,
            seed,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_string(&generate_cohort(&small(3)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_cohort(&small(3)).unwrap()).unwrap();
        let c = serde_json::to_string(&generate_cohort(&small(4)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(1);
        cfg.base_event_rate = 1.0;
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = small(1);
        cfg.end_date = cfg.start_date;
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = small(1);
        cfg.signal_strength = -1.0;
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn patient_day_rate_tracks_base_rate() {
        let cfg = CohortConfig {
            n_patients: 100,
            base_event_rate: 0.05,
            seed: 7,
            ..CohortConfig::default()
        };
        let (kept, _) = apply_cohort_filters(generate_cohort(&cfg).unwrap());
        let (mut pos, mut days) = (0usize, 0usize);
        for stay in &kept {
            for key in enumerate_patient_days(stay) {
                pos += label_day(stay, &key) as usize;
                days += 1;
            }
        }
        let rate = pos as f64 / days as f64;
        assert!((rate - 0.05).abs() <= 0.02, "rate {rate} over {days} days");
    }

    #[test]
    fn corrupted_stays_trip_every_filter() {
        let cfg = CohortConfig {
            n_patients: 300,
            invalid_fraction: 0.05,
            ..CohortConfig::default()
        };
        let (kept, rejected) = apply_cohort_filters(generate_cohort(&cfg).unwrap());
        assert_eq!(kept.len() + rejected.len(), 300);
        for reason in [
            RejectReason::ShortStay,
            RejectReason::EventOutsideWindow,
            RejectReason::MissingAdmission,
        ] {
            assert!(rejected.iter().any(|(_, r)| *r == reason), "{reason:?}");
        }
    }

    #[test]
    fn kept_records_lie_within_stays() {
        let (kept, _) = apply_cohort_filters(generate_cohort(&small(11)).unwrap());
        for stay in &kept {
            assert!(stay.admission_ts.unwrap() < stay.discharge_ts.unwrap());
            assert!(stay.feature_timestamps().all(|ts| stay.in_window(ts)));
            assert!(stay.vitals.iter().chain(&stay.labs).all(|m| m.value.is_finite()));
            for pair in stay.in_icu_intervals.windows(2) {
                assert!(pair[0].end <= pair[1].start, "{}", stay.patient_id);
            }
            for iv in &stay.in_icu_intervals {
                assert!(stay.in_window(iv.start) && stay.in_window(iv.end));
            }
        }
    }

    #[test]
    fn intercept_hits_rate() {
        let linear = [-1.0, 0.0, 2.0, 3.5];
        let a = solve_intercept(linear.iter().copied(), 1.0, 0.1);
        let mean = linear.iter().map(|l| sigmoid(a + l)).sum::<f64>() / 4.0;
        assert!((mean - 0.1).abs() < 1e-12);
    }
}
