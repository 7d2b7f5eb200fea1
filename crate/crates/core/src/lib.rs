//! Daily patient-deterioration early warning: synthetic EHR cohorts,
//! multimodal featurization, tree-ensemble risk models, exact TreeSHAP
//! explanations, evaluation metrics and tiered alerting.

pub mod alerting;
pub mod cohort;
pub mod evaluate;
pub mod explain;
pub mod features;
pub mod ingest;
pub mod model;
pub mod textembed;
pub mod time;
