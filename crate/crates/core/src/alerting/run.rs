use std::collections::HashMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rayon::prelude::*;

use super::{assign_tier, retrain_schedule_check, AlertError, AlertRecord, AlertStore, Freshness, TierThresholds};
use crate::cohort::{PatientDayKey, PatientStay};
use crate::explain::{ExplainError, Explainer, ExplanationRecord};
use crate::features::{FeatureVector, Featurizer, OperationalStats};
use crate::ingest::{leakage_audit, IntegrityReport};
use crate::model::TreeEnsemble;
use crate::time::{day_cut, publish_time};

/// Output of one scoring cycle. `alerts` and `features` are aligned and
/// sorted by patient-day.
#[derive(Debug, Clone)]
pub struct DailyRun {
    pub date: NaiveDate,
    pub alerts: Vec<AlertRecord>,
    pub features: Vec<FeatureVector>,
    pub integrity: IntegrityReport,
    pub freshness: Freshness,
    pub warnings: Vec<String>,
}

impl DailyRun {
    /// Per-alert explanations against the model's stored background, or
    /// against this run's own rows when the model carries none.
    pub fn explanations(&self, model: &TreeEnsemble) -> Result<Vec<ExplanationRecord>, ExplainError> {
        if self.features.is_empty() {
            return Ok(Vec::new());
        }
        let own: Vec<Vec<f64>>;
        let background = if model.background.is_empty() {
            own = self.features.iter().map(|f| f.values.clone()).collect();
            &own
        } else {
            &model.background
        };
        let explainer = Explainer::new(model, background)?;
        let rows: Vec<Vec<f64>> = self.features.iter().map(|f| f.values.clone()).collect();
        Ok(explainer
            .explain_batch(&rows)?
            .iter()
            .zip(&self.features)
            .map(|(e, f)| ExplanationRecord::new(&f.patient_day, e, &model.feature_names))
            .collect())
    }
}

/// What was knowable at `cut`: stays admitted by then, with later records,
/// outcomes and ICU transfers removed and later discharges erased.
pub fn snapshot_at_cut(stays: &[PatientStay], cut: NaiveDateTime) -> Vec<PatientStay> {
    stays
        .iter()
        .filter(|s| s.admission_ts.is_some_and(|a| a <= cut))
        .map(|s| {
            let mut s = s.clone();
            s.retain_up_to(cut);
            s.in_icu_intervals.retain(|iv| iv.start <= cut);
            if s.discharge_ts.is_some_and(|d| d > cut) {
                s.discharge_ts = None;
            }
            s
        })
        .collect()
}

fn prior_risks(
    store: Option<&AlertStore>,
    date: NaiveDate,
    warnings: &mut Vec<String>,
) -> Result<HashMap<String, f64>, AlertError> {
    let run = match store {
        Some(store) => store.load_run(date)?,
        None => None,
    };
    match run {
        Some(run) => Ok(run.into_iter().map(|a| (a.patient_day.patient_id, a.risk)).collect()),
        None => {
            let msg = format!("no stored run for {date}; deltas against it are absent");
            log::warn!("{msg}");
            warnings.push(msg);
            Ok(HashMap::new())
        }
    }
}

/// Scores every patient present on a non-ICU ward at `run_date`'s 23:59 cut.
///
/// Only records charted at or before the cut are used. Previous-day risks
/// come from `store`; a missing store or run leaves them absent. Nothing is
/// written: persist with [`AlertStore::write_run`].
pub fn daily_run(
    stays: &[PatientStay],
    featurizer: &Featurizer,
    model: &TreeEnsemble,
    thresholds: &TierThresholds,
    run_date: NaiveDate,
    store: Option<&AlertStore>,
) -> Result<DailyRun, AlertError> {
    thresholds.validate()?;
    model.check_manifest(featurizer.manifest())?;
    let freshness = retrain_schedule_check(model, run_date + Duration::days(1))?;
    let mut warnings = Vec::new();
    if freshness == Freshness::Stale {
        let msg = format!(
            "model trained on {} is past its retraining date; alerts are flagged stale",
            model.trained_on.expect("checked")
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let cut = day_cut(run_date);
    let snapshot = snapshot_at_cut(stays, cut);
    let keys: Vec<PatientDayKey> = snapshot
        .iter()
        .filter(|s| s.present_at(cut) && !s.in_icu_at(cut))
        .map(|s| PatientDayKey::new(s.patient_id.clone(), run_date))
        .collect();
    let (snapshot, integrity) = leakage_audit(&snapshot, &keys);
    let ops = OperationalStats::from_stays(&snapshot);
    let scored: Vec<&PatientStay> = snapshot
        .iter()
        .filter(|s| s.present_at(cut) && !s.in_icu_at(cut))
        .collect();
    featurizer.prefetch_text(&scored.iter().map(|s| (*s).clone()).collect::<Vec<_>>());
    let mut features: Vec<FeatureVector> = scored
        .par_iter()
        .map(|s| featurizer.featurize_stay(s, &[PatientDayKey::new(s.patient_id.clone(), run_date)], &ops))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    features.sort_by(|a, b| a.patient_day.cmp(&b.patient_day));

    let prev1 = prior_risks(store, run_date - Duration::days(1), &mut warnings)?;
    let prev2 = prior_risks(store, run_date - Duration::days(2), &mut warnings)?;
    let locations: HashMap<&str, &PatientStay> = scored.iter().map(|s| (s.patient_id.as_str(), *s)).collect();
    let scored_at = publish_time(run_date);
    let alerts = features
        .iter()
        .map(|f| {
            let id = f.patient_day.patient_id.as_str();
            let risk = model.predict_proba(&f.values)?;
            let risk_prev1 = prev1.get(id).copied();
            Ok(AlertRecord {
                patient_day: f.patient_day.clone(),
                risk,
                risk_prev1,
                risk_prev2: prev2.get(id).copied(),
                tier: assign_tier(risk, risk_prev1, thresholds),
                scored_at,
                location: locations[id].location.clone(),
                model_stale: freshness == Freshness::Stale,
            })
        })
        .collect::<Result<Vec<_>, AlertError>>()?;
    Ok(DailyRun {
        date: run_date,
        alerts,
        features,
        integrity,
        freshness,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::alerting::Tier;
    use crate::cohort::tests::{bare_stay, ts};
    use crate::cohort::{IcuInterval, Measurement};
    use crate::features::{FeatureConfig, MedicationSignalConfig};
    use crate::model::{train_gbt, HyperParams, TrainSet};
    use crate::textembed::{HashEmbedder, PromptTemplate};

    fn featurizer() -> Featurizer {
        Featurizer::new(
            FeatureConfig::default(),
            MedicationSignalConfig::default(),
            Arc::new(HashEmbedder::default()),
            PromptTemplate::default(),
        )
        .unwrap()
    }

    /// A model that depends only on the last heart rate of the day.
    fn heart_rate_model(fz: &Featurizer) -> TreeEnsemble {
        let n = fz.manifest().len();
        let j = fz.manifest().position("heart_rate_last").unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let mut r = vec![0.0; n];
                r[j] = 60.0 + i as f64 * 2.0;
                r
            })
            .collect();
        let labels = (0..40).map(|i| u8::from(i >= 30)).collect();
        let mut m = train_gbt(&TrainSet::new(rows, labels).unwrap(), &HyperParams::gbt(5, 2), 0).unwrap();
        m.bind_manifest(fz.manifest()).unwrap();
        m.trained_on = Some(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap());
        m
    }

    fn hr(value: f64, at: &str) -> Measurement {
        Measurement {
            name: "heart_rate".into(),
            value,
            ts: ts(at),
        }
    }

    fn cohort() -> Vec<PatientStay> {
        let mut a = bare_stay("a", "2024-03-01 09:00", "2024-03-10 12:00");
        a.vitals = vec![hr(70.0, "2024-03-01 10:00"), hr(140.0, "2024-03-02 10:00"), hr(150.0, "2024-03-03 10:00")];
        let mut b = bare_stay("b", "2024-03-01 09:00", "2024-03-10 12:00");
        b.vitals = vec![hr(65.0, "2024-03-01 10:00")];
        let mut icu = bare_stay("c", "2024-03-01 09:00", "2024-03-10 12:00");
        icu.in_icu_intervals = vec![IcuInterval {
            start: ts("2024-03-02 01:00"),
            end: ts("2024-03-04 01:00"),
        }];
        let gone = bare_stay("d", "2024-02-01 09:00", "2024-03-01 12:00");
        let later = bare_stay("e", "2024-03-05 09:00", "2024-03-10 12:00");
        vec![a, b, icu, gone, later]
    }

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 3, d).unwrap()
    }

    #[test]
    fn scores_present_non_icu_patients_with_deltas() {
        let fz = featurizer();
        let model = heart_rate_model(&fz);
        let dir = tempfile::tempdir().unwrap();
        let store = AlertStore::open(dir.path()).unwrap();
        let th = TierThresholds::default();

        let day1 = daily_run(&cohort(), &fz, &model, &th, date(1), Some(&store)).unwrap();
        let ids: Vec<&str> = day1.alerts.iter().map(|a| a.patient_day.patient_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(day1.alerts.iter().all(|a| a.risk_prev1.is_none() && a.risk_prev2.is_none()));
        assert!(day1.alerts.iter().all(|a| a.scored_at == ts("2024-03-02 08:00")));
        assert_eq!(day1.warnings.len(), 2);
        store.write_run(date(1), &day1.alerts, &model.manifest_hash).unwrap();

        let day2 = daily_run(&cohort(), &fz, &model, &th, date(2), Some(&store)).unwrap();
        let ids: Vec<&str> = day2.alerts.iter().map(|a| a.patient_day.patient_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let a = &day2.alerts[0];
        assert_eq!(a.risk_prev1, Some(day1.alerts[0].risk));
        assert!(a.risk > day1.alerts[0].risk);
        assert_eq!(a.tier, assign_tier(a.risk, a.risk_prev1, &th));
        assert_eq!(a.tier, Tier::Red);
        assert!(!a.model_stale);
    }

    #[test]
    fn later_records_do_not_change_scores() {
        let fz = featurizer();
        let model = heart_rate_model(&fz);
        let th = TierThresholds::default();
        let base = daily_run(&cohort(), &fz, &model, &th, date(1), None).unwrap();
        let mut mutated = cohort();
        mutated[1].vitals.push(hr(190.0, "2024-03-02 00:00"));
        mutated[1].vitals.push(hr(190.0, "2024-03-01 23:59"));
        let after = daily_run(&mutated, &fz, &model, &th, date(1), None).unwrap();
        assert_eq!(base.alerts[0].risk.to_bits(), after.alerts[0].risk.to_bits());
        // The 23:59 record itself is inside the cut.
        assert_ne!(base.alerts[1].risk.to_bits(), after.alerts[1].risk.to_bits());
    }

    #[test]
    fn refusals_and_staleness() {
        let fz = featurizer();
        let mut model = heart_rate_model(&fz);
        let th = TierThresholds::default();
        model.trained_on = Some(date(1) - Duration::days(200));
        let run = daily_run(&cohort(), &fz, &model, &th, date(1), None).unwrap();
        assert_eq!(run.freshness, Freshness::Stale);
        assert!(run.alerts.iter().all(|a| a.model_stale));

        model.manifest_hash = "other".into();
        assert!(matches!(
            daily_run(&cohort(), &fz, &model, &th, date(1), None),
            Err(AlertError::Model(_))
        ));
    }

    #[test]
    fn snapshot_forgets_the_future() {
        let cut = ts("2024-03-02 23:59");
        let snap = snapshot_at_cut(&cohort(), cut);
        assert_eq!(snap.len(), 4);
        assert!(snap[0].discharge_ts.is_none());
        assert_eq!(snap[0].vitals.len(), 2);
        assert_eq!(snap[3].discharge_ts, Some(ts("2024-03-01 12:00")));
    }

    #[test]
    fn explanations_cover_every_alert() {
        let fz = featurizer();
        let model = heart_rate_model(&fz);
        let run = daily_run(&cohort(), &fz, &model, &TierThresholds::default(), date(2), None).unwrap();
        let ex = run.explanations(&model).unwrap();
        assert_eq!(ex.len(), run.alerts.len());
        for (e, a) in ex.iter().zip(&run.alerts) {
            assert_eq!(e.patient_day, a.patient_day.to_string());
            let sum: f64 = e.features.iter().map(|f| f.phi).sum();
            assert!((e.base + sum - e.margin).abs() < 1e-9);
        }
    }
}
