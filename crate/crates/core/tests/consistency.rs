//! Rows scored in a daily run match the training table rows for the same patient-day.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::Duration;

use ewi_core::alerting::{daily_run, TierThresholds};
use ewi_core::cohort::{apply_cohort_filters, generate_cohort, CohortConfig};
use ewi_core::features::{build_feature_table, FeatureConfig, Featurizer, MedicationSignalConfig, OperationalStats};
use ewi_core::model::{train_gbt, HyperParams, TrainSet};
use ewi_core::textembed::{HashEmbedder, PromptTemplate};

#[test]
fn daily_run_features_match_training_table() {
    let config = CohortConfig {
        n_patients: 150,
        seed: 31,
        ..CohortConfig::default()
    };
    let (stays, _) = apply_cohort_filters(generate_cohort(&config).unwrap());
    let fz = Featurizer::new(
        FeatureConfig::default(),
        MedicationSignalConfig::default(),
        Arc::new(HashEmbedder::default()),
        PromptTemplate::default(),
    )
    .unwrap();
    let table = build_feature_table(&fz, &stays, &OperationalStats::from_stays(&stays)).unwrap();
    let mut model = train_gbt(&TrainSet::from_table(&table), &HyperParams::gbt(5, 2), 0).unwrap();
    model.bind_manifest(&table.manifest).unwrap();
    let last = *table.dates().iter().max().unwrap();
    model.trained_on = Some(last);

    let rows: HashMap<_, _> = table.keys.iter().zip(&table.rows).collect();
    let mut compared = 0;
    for back in (5..150).step_by(7) {
        let date = last - Duration::days(back);
        let run = daily_run(&stays, &fz, &model, &TierThresholds::default(), date, None).unwrap();
        for fv in &run.features {
            if let Some(row) = rows.get(&fv.patient_day) {
                let same = row.iter().zip(&fv.values).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "feature mismatch for {}", fv.patient_day);
                compared += 1;
            }
        }
    }
    assert!(compared > 50, "only {compared} rows compared");
}
