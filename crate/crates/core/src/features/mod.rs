//! Patient-day feature vectors.
//!
//! Each eligible patient-day becomes one fixed-length vector built from
//! three modalities: tabular (statics and operational context), time series
//! (daily stats of vitals and labs) and text (medication flags plus the pooled
//! record embedding). Tabular and time-series gaps are filled by carrying the
//! last value forward within the stay, then 0.

mod daily;
mod medication;
mod tabular;

pub use daily::{aggregate_day, impute, DailyStats};
pub use medication::{medication_signals, MedicationFlags, MedicationSignalConfig};
pub use tabular::{encode_level, encode_tabular, OperationalContext, OperationalStats, TABULAR_NAMES};

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{
    enumerate_patient_days, label_day, Measurement, PatientDayKey, PatientStay, Route,
};
use crate::textembed::{embed_text, pool_day, text_fingerprint, EmbedError, Embedder, PromptTemplate};
use crate::time::day_cut;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature configuration error: {0}")]
    Config(String),
    #[error("invalid value {value:?} for field `{field}`")]
    InvalidValue { field: &'static str, value: String },
    #[error("unknown level {level:?} for categorical field `{field}`")]
    UnknownLevel { field: &'static str, level: String },
    #[error("{modality} block has {got} values, manifest expects {expected}")]
    Dimension {
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("feature manifest mismatch: expected {expected}, got {got}")]
    ManifestMismatch { expected: String, got: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {message}")]
    Table { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Tabular,
    Timeseries,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Tabular, Modality::Timeseries, Modality::Text];

    fn bit(self) -> u8 {
        match self {
            Modality::Tabular => 1,
            Modality::Timeseries => 2,
            Modality::Text => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Tabular => "tabular",
            Modality::Timeseries => "timeseries",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "tabular" => Ok(Modality::Tabular),
            "timeseries" => Ok(Modality::Timeseries),
            "text" => Ok(Modality::Text),
            other => Err(FeatureError::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Non-empty subset of the three modalities, written as e.g. `tabular+text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet(7);

    pub fn new(modalities: &[Modality]) -> Result<Self, FeatureError> {
        let bits = modalities.iter().fold(0, |acc, m| acc | m.bit());
        if bits == 0 {
            return Err(FeatureError::Config("modality set must not be empty".into()));
        }
        Ok(ModalitySet(bits))
    }

    pub fn only(m: Modality) -> Self {
        ModalitySet(m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// The seven non-empty subsets: singles, pairs, then all three.
    pub fn combinations() -> [ModalitySet; 7] {
        [1, 2, 4, 3, 5, 6, 7].map(ModalitySet)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Modality::as_str).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(ModalitySet::ALL);
        }
        let parts = s
            .split(['+', ','])
            .map(str::parse)
            .collect::<Result<Vec<Modality>, _>>()?;
        ModalitySet::new(&parts)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub modality: Modality,
}

/// Ordered feature names with modality tags. Modalities occupy contiguous
/// blocks in tabular, time-series, text order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub features: Vec<FeatureSpec>,
    /// Identity of the text embedder behind the text block.
    pub embedder: String,
}

impl FeatureManifest {
    pub fn new(features: Vec<FeatureSpec>, embedder: impl Into<String>) -> Result<Self, FeatureError> {
        if features.windows(2).any(|w| w[0].modality > w[1].modality) {
            return Err(FeatureError::Config(
                "manifest modalities must be in tabular, timeseries, text order".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = features.iter().find(|f| !seen.insert(f.name.as_str())) {
            return Err(FeatureError::Config(format!("duplicate feature name {:?}", dup.name)));
        }
        Ok(FeatureManifest {
            features,
            embedder: embedder.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.features.iter().filter(|f| f.modality == modality).count()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.count(*m) > 0).collect()
    }

    /// Hex sha256 over the embedder identity and every `name<TAB>modality` line.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.embedder.as_bytes());
        h.update(b"\n");
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update(b"\t");
            h.update(f.modality.as_str().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Sub-manifest for `set` plus the column indices it keeps.
    pub fn select(&self, set: ModalitySet) -> (FeatureManifest, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| set.contains(self.features[i].modality))
            .collect();
        let manifest = FeatureManifest {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            embedder: self.embedder.clone(),
        };
        (manifest, idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub patient_day: PatientDayKey,
    pub values: Vec<f64>,
    pub manifest: Arc<FeatureManifest>,
}

/// Concatenates per-modality blocks in manifest order.
///
/// A block for a modality the manifest does not carry must be empty; every
/// other block must match the manifest's count for that modality.
pub fn assemble_vector(
    patient_day: PatientDayKey,
    tabular: &[f64],
    timeseries: &[f64],
    text: &[f64],
    manifest: &Arc<FeatureManifest>,
) -> Result<FeatureVector, FeatureError> {
    let mut values = Vec::with_capacity(manifest.len());
    for (modality, block) in Modality::ALL.into_iter().zip([tabular, timeseries, text]) {
        let expected = manifest.count(modality);
        if block.len() != expected {
            return Err(FeatureError::Dimension {
                modality,
                expected,
                got: block.len(),
            });
        }
        values.extend_from_slice(block);
    }
    if let Some(j) = values.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::Config(format!(
            "feature {} is not finite for {patient_day}",
            manifest.features[j].name
        )));
    }
    Ok(FeatureVector {
        patient_day,
        values,
        manifest: Arc::clone(manifest),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub vitals: Vec<String>,
    pub labs: Vec<String>,
    pub modalities: ModalitySet,
    /// Pool medication and diagnosis embeddings into separate vectors.
    pub split_text_sources: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            vitals: ["heart_rate", "sbp", "spo2", "resp_rate", "temperature"]
                .map(String::from)
                .to_vec(),
            labs: ["potassium", "creatinine", "lactate"].map(String::from).to_vec(),
            modalities: ModalitySet::ALL,
            split_text_sources: false,
        }
    }
}

/// Text fed to the embedder for one medication order.
pub fn medication_text(name: &str, dose: &str, route: Route) -> String {
    let route = match route {
        Route::Intravenous => "intravenous",
        Route::Oral => "oral",
        Route::Other => "other",
    };
    format!("{name} {dose} {route}")
}

/// Text fed to the embedder for one diagnosis.
pub fn diagnosis_text(code: &str, description: &str) -> String {
    format!("{code} {description}")
}

type CachedEmbedding = Option<Arc<[f64]>>;

pub struct Featurizer {
    config: FeatureConfig,
    medications: MedicationSignalConfig,
    embedder: Arc<dyn Embedder>,
    prompt: PromptTemplate,
    manifest: Arc<FeatureManifest>,
    cache: RwLock<HashMap<String, CachedEmbedding>>,
}

impl Featurizer {
    pub fn new(
        config: FeatureConfig,
        medications: MedicationSignalConfig,
        embedder: Arc<dyn Embedder>,
        prompt: PromptTemplate,
    ) -> Result<Self, FeatureError> {
        medications.validate()?;
        let measures: Vec<&String> = config.vitals.iter().chain(&config.labs).collect();
        if measures.is_empty() && config.modalities.contains(Modality::Timeseries) {
            return Err(FeatureError::Config("no vitals or labs configured".into()));
        }
        let mut features = Vec::new();
        let mut push = |name: String, modality| features.push(FeatureSpec { name, modality });
        if config.modalities.contains(Modality::Tabular) {
            for name in TABULAR_NAMES {
                push(name.to_string(), Modality::Tabular);
            }
        }
        if config.modalities.contains(Modality::Timeseries) {
            for m in &measures {
                for stat in DailyStats::FIELDS {
                    push(format!("{m}_{stat}"), Modality::Timeseries);
                }
            }
        }
        if config.modalities.contains(Modality::Text) {
            for name in MedicationFlags::NAMES {
                push(name.to_string(), Modality::Text);
            }
            let prefixes: &[&str] = if config.split_text_sources { &["med_emb", "dx_emb"] } else { &["text_emb"] };
            for prefix in prefixes {
                for j in 0..embedder.dim() {
                    push(format!("{prefix}_{j:03}"), Modality::Text);
                }
            }
        }
        let manifest = FeatureManifest::new(features, embedder.identity())?;
        Ok(Featurizer {
            config,
            medications,
            embedder,
            prompt,
            manifest: Arc::new(manifest),
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn manifest(&self) -> &Arc<FeatureManifest> {
        &self.manifest
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    fn wants_text(&self) -> bool {
        self.config.modalities.contains(Modality::Text)
    }

    /// Embeds every distinct record text of `stays` in one batch, so remote
    /// embedders can run requests concurrently.
    pub fn prefetch_text(&self, stays: &[PatientStay]) {
        if !self.wants_text() {
            return;
        }
        let mut texts: Vec<String> = stays
            .iter()
            .flat_map(|s| {
                s.medications
                    .iter()
                    .map(|m| medication_text(&m.name, &m.dose, m.route))
                    .chain(s.diagnoses.iter().map(|d| diagnosis_text(&d.code, &d.description)))
            })
            .collect();
        texts.sort();
        texts.dedup();
        {
            let cache = self.cache.read().expect("embedding cache");
            texts.retain(|t| !cache.contains_key(t));
        }
        if texts.is_empty() {
            return;
        }
        let rendered: Vec<String> = texts.iter().map(|t| self.prompt.render(t)).collect();
        let results = self.embedder.embed_batch(&rendered);
        let mut cache = self.cache.write().expect("embedding cache");
        for (text, result) in texts.into_iter().zip(results) {
            let entry = self.accept(&text, result);
            cache.insert(text, entry);
        }
    }

    fn accept(&self, text: &str, result: Result<Vec<f64>, EmbedError>) -> CachedEmbedding {
        match result {
            Ok(v) if v.len() == self.embedder.dim() => Some(v.into()),
            Ok(v) => {
                log::warn!(
                    "embedding for {} has dimension {}, expected {}; treated as missing",
                    text_fingerprint(text),
                    v.len(),
                    self.embedder.dim()
                );
                None
            }
            Err(e) => {
                log::warn!("embedding for {} missing: {e}", text_fingerprint(text));
                None
            }
        }
    }

    fn record_embedding(&self, text: &str) -> CachedEmbedding {
        if let Some(hit) = self.cache.read().expect("embedding cache").get(text) {
            return hit.clone();
        }
        let result = embed_text(self.embedder.as_ref(), &self.prompt, text);
        let entry = self.accept(text, result);
        self.cache
            .write()
            .expect("embedding cache")
            .insert(text.to_string(), entry.clone());
        entry
    }

    fn pooled(&self, texts: &[String]) -> Result<Vec<f64>, FeatureError> {
        let vectors: Vec<Vec<f64>> = texts
            .iter()
            .filter_map(|t| self.record_embedding(t))
            .map(|v| v.to_vec())
            .collect();
        Ok(pool_day(&vectors, self.embedder.dim())?)
    }

    /// Feature vectors for `keys` (all belonging to `stay`, ascending dates).
    ///
    /// Every calendar day from admission to the last key is computed so that
    /// carried-forward values and trends see the full history; only the
    /// requested days are returned. Each day uses records at or before its
    /// 23:59 cut only.
    pub fn featurize_stay(
        &self,
        stay: &PatientStay,
        keys: &[PatientDayKey],
        ops: &OperationalStats,
    ) -> Result<Vec<FeatureVector>, FeatureError> {
        let (Some(admission), Some(last_key)) = (stay.admission_ts, keys.last()) else {
            return Ok(Vec::new());
        };
        if keys.windows(2).any(|w| w[0].date >= w[1].date)
            || keys.iter().any(|k| k.patient_id != stay.patient_id)
        {
            return Err(FeatureError::Config(format!(
                "keys for {} must belong to the stay and be strictly ascending",
                stay.patient_id
            )));
        }
        let first = admission.date();
        let n_days = usize::try_from((last_key.date - first).num_days() + 1).unwrap_or(0);
        if n_days == 0 {
            return Err(FeatureError::Config(format!("key {last_key} precedes admission")));
        }
        let day_index = |date: NaiveDate| -> Option<usize> {
            let d = (date - first).num_days();
            (0..n_days as i64).contains(&d).then_some(d as usize)
        };

        let tab_on = self.config.modalities.contains(Modality::Tabular);
        let ts_on = self.config.modalities.contains(Modality::Timeseries);
        let text_on = self.wants_text();

        // Numeric block (tabular + time series) with NaN gaps, one row per day.
        let n_tab = if tab_on { TABULAR_NAMES.len() } else { 0 };
        let measures: Vec<&str> = self
            .config
            .vitals
            .iter()
            .chain(&self.config.labs)
            .map(String::as_str)
            .collect();
        let n_ts = if ts_on { measures.len() * DailyStats::FIELDS.len() } else { 0 };
        let mut numeric = vec![vec![f64::NAN; n_tab + n_ts]; n_days];

        if tab_on {
            for (i, row) in numeric.iter_mut().enumerate() {
                let date = first + chrono::Duration::days(i as i64);
                let ctx = ops.context(stay, date);
                for (j, (_, v)) in encode_tabular(&stay.statics, &ctx)?.into_iter().enumerate() {
                    row[j] = v;
                }
            }
        }
        if ts_on {
            let slot: HashMap<&str, usize> = measures.iter().enumerate().map(|(i, m)| (*m, i)).collect();
            let mut buckets: Vec<Vec<Vec<(f64, chrono::NaiveDateTime)>>> =
                vec![vec![Vec::new(); measures.len()]; n_days];
            let samples = stay.vitals.iter().chain(&stay.labs);
            for Measurement { name, value, ts } in samples {
                if let (Some(&m), Some(d)) = (slot.get(name.as_str()), day_index(ts.date())) {
                    if value.is_finite() {
                        buckets[d][m].push((*value, *ts));
                    }
                }
            }
            let mut prev_avg = vec![None; measures.len()];
            for (d, day) in buckets.iter().enumerate() {
                for (m, samples) in day.iter().enumerate() {
                    let stats = aggregate_day(samples, prev_avg[m]);
                    prev_avg[m] = stats.avg;
                    let base = n_tab + m * DailyStats::FIELDS.len();
                    numeric[d][base..base + DailyStats::FIELDS.len()].copy_from_slice(&stats.to_row());
                }
            }
        }
        impute(&mut numeric);

        let mut out = Vec::with_capacity(keys.len());
        for key in keys {
            let d = day_index(key.date).expect("key within computed days");
            let cut = day_cut(key.date);
            let text = if text_on {
                let upto = stay.medications.partition_point(|m| m.ts <= cut);
                let flags = medication_signals(&stay.medications[..upto], &self.medications, key.date);
                let meds: Vec<String> = stay.medications[..upto]
                    .iter()
                    .filter(|m| m.ts.date() == key.date)
                    .map(|m| medication_text(&m.name, &m.dose, m.route))
                    .collect();
                let dx: Vec<String> = stay
                    .diagnoses
                    .iter()
                    .filter(|x| x.ts.date() == key.date && x.ts <= cut)
                    .map(|x| diagnosis_text(&x.code, &x.description))
                    .collect();
                let mut block = flags.to_row().to_vec();
                if self.config.split_text_sources {
                    block.extend(self.pooled(&meds)?);
                    block.extend(self.pooled(&dx)?);
                } else {
                    let all: Vec<String> = meds.into_iter().chain(dx).collect();
                    block.extend(self.pooled(&all)?);
                }
                block
            } else {
                Vec::new()
            };
            let row = &numeric[d];
            out.push(assemble_vector(
                key.clone(),
                &row[..n_tab],
                &row[n_tab..],
                &text,
                &self.manifest,
            )?);
        }
        Ok(out)
    }
}

/// Feature matrix for a set of patient-days, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub manifest: Arc<FeatureManifest>,
    pub keys: Vec<PatientDayKey>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.keys.iter().map(|k| k.date).collect()
    }

    /// Keeps only the columns of `set`.
    pub fn select(&self, set: ModalitySet) -> FeatureTable {
        let (manifest, idx) = self.manifest.select(set);
        FeatureTable {
            manifest: Arc::new(manifest),
            keys: self.keys.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&j| r[j]).collect())
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Writes a tab-separated table and a JSON manifest at `<path>.manifest.json`.
    pub fn write_tsv(&self, path: &Path) -> Result<(), FeatureError> {
        let err = |e: std::io::Error| FeatureError::Table {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(err)?);
        let header: Vec<&str> = ["patient_day", "label"]
            .into_iter()
            .chain(self.manifest.names())
            .collect();
        writeln!(w, "{}", header.join("\t")).map_err(err)?;
        for ((key, label), row) in self.keys.iter().zip(&self.labels).zip(&self.rows) {
            write!(w, "{key}\t{label}").map_err(err)?;
            for v in row {
                write!(w, "\t{v}").map_err(err)?;
            }
            writeln!(w).map_err(err)?;
        }
        w.flush().map_err(err)?;
        let manifest = serde_json::to_string_pretty(self.manifest.as_ref()).expect("manifest serializes");
        std::fs::write(manifest_path(path), manifest).map_err(err)
    }

    pub fn read_tsv(path: &Path) -> Result<FeatureTable, FeatureError> {
        let fail = |message: String| FeatureError::Table {
            path: path.to_path_buf(),
            message,
        };
        let mpath = manifest_path(path);
        let manifest: FeatureManifest = serde_json::from_str(
            &std::fs::read_to_string(&mpath).map_err(|e| fail(format!("{}: {e}", mpath.display())))?,
        )
        .map_err(|e| fail(format!("{}: {e}", mpath.display())))?;
        let file = std::fs::File::open(path).map_err(|e| fail(e.to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| fail("empty table".into()))?
            .map_err(|e| fail(e.to_string()))?;
        let names: Vec<&str> = header.split('\t').skip(2).collect();
        if !names.iter().copied().eq(manifest.names()) {
            return Err(fail("header does not match the sidecar manifest".into()));
        }
        let mut table = FeatureTable {
            manifest: Arc::new(manifest),
            keys: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| fail(e.to_string()))?;
            let mut cells = line.split('\t');
            let bad = |what: &str| fail(format!("line {}: {what}", i + 2));
            let key: PatientDayKey = cells
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad patient_day"))?;
            let label: u8 = cells
                .next()
                .and_then(|c| c.parse().ok())
                .filter(|l| *l <= 1)
                .ok_or_else(|| bad("bad label"))?;
            let row = cells
                .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad("bad value"))?;
            if row.len() != table.manifest.len() {
                return Err(bad("wrong number of columns"));
            }
            table.keys.push(key);
            table.labels.push(label);
            table.rows.push(row);
        }
        Ok(table)
    }
}

pub fn manifest_path(table: &Path) -> PathBuf {
    let mut s = table.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Featurizes and labels every patient-day of every stay, in parallel over
/// stays. Rows come out grouped by stay in input order, days ascending.
pub fn build_feature_table(
    featurizer: &Featurizer,
    stays: &[PatientStay],
    ops: &OperationalStats,
) -> Result<FeatureTable, FeatureError> {
    featurizer.prefetch_text(stays);
    let per_stay = stays
        .par_iter()
        .map(|stay| {
            let keys = enumerate_patient_days(stay);
            let vectors = featurizer.featurize_stay(stay, &keys, ops)?;
            let labels: Vec<u8> = keys.iter().map(|k| label_day(stay, k)).collect();
            Ok((vectors, labels))
        })
        .collect::<Result<Vec<_>, FeatureError>>()?;
    let mut table = FeatureTable {
        manifest: Arc::clone(featurizer.manifest()),
        keys: Vec::new(),
        rows: Vec::new(),
        labels: Vec::new(),
    };
    for (vectors, labels) in per_stay {
        for v in vectors {
            table.keys.push(v.patient_day);
            table.rows.push(v.values);
        }
        table.labels.extend(labels);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::{bare_stay, ts};
    use crate::cohort::{generate_cohort, apply_cohort_filters, CohortConfig, MedAction, MedicationOrder};
    use crate::textembed::HashEmbedder;

    fn featurizer(config: FeatureConfig) -> Featurizer {
        Featurizer::new(
            config,
            MedicationSignalConfig::default(),
            Arc::new(HashEmbedder::default()),
            PromptTemplate::default(),
        )
        .unwrap()
    }

    fn m(name: &str, value: f64, at: &str) -> Measurement {
        Measurement {
            name: name.into(),
            value,
            ts: ts(at),
        }
    }

    #[test]
    fn default_manifest_layout() {
        let f = featurizer(FeatureConfig::default());
        let man = f.manifest();
        assert_eq!(man.count(Modality::Tabular), 8);
        assert_eq!(man.count(Modality::Timeseries), 40);
        assert_eq!(man.count(Modality::Text), 4 + 312);
        assert_eq!(man.len(), 364);
        assert_eq!(man.hash(), featurizer(FeatureConfig::default()).manifest().hash());
        let no_text = featurizer(FeatureConfig {
            modalities: "tabular+timeseries".parse().unwrap(),
            ..FeatureConfig::default()
        });
        assert_eq!(no_text.manifest().len(), 48);
        assert_eq!(no_text.manifest().count(Modality::Text), 0);
        assert_ne!(no_text.manifest().hash(), man.hash());
    }

    #[test]
    fn assemble_checks_each_block() {
        let specs = (0..10)
            .map(|i| FeatureSpec { name: format!("t{i}"), modality: Modality::Tabular })
            .chain((0..20).map(|i| FeatureSpec { name: format!("s{i}"), modality: Modality::Timeseries }))
            .chain((0..312).map(|i| FeatureSpec { name: format!("x{i}"), modality: Modality::Text }))
            .collect();
        let man = Arc::new(FeatureManifest::new(specs, "test").unwrap());
        let key = PatientDayKey::new("p", NaiveDate::from_ymd_opt(2022, 1, 1).unwrap());
        let v = assemble_vector(key.clone(), &[1.0; 10], &[2.0; 20], &[0.5; 312], &man).unwrap();
        assert_eq!(v.values.len(), 342);
        assert!(matches!(
            assemble_vector(key.clone(), &[1.0; 9], &[2.0; 20], &[0.5; 312], &man),
            Err(FeatureError::Dimension { modality: Modality::Tabular, expected: 10, got: 9 })
        ));
        let (sub, idx) = man.select("tabular+timeseries".parse().unwrap());
        assert_eq!(sub.len(), 30);
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
        let sub = Arc::new(sub);
        let v = assemble_vector(key, &[1.0; 10], &[2.0; 20], &[], &sub).unwrap();
        assert_eq!(v.values.len(), 30);
    }

    #[test]
    fn manifest_rejects_out_of_order_blocks() {
        let specs = vec![
            FeatureSpec { name: "a".into(), modality: Modality::Text },
            FeatureSpec { name: "b".into(), modality: Modality::Tabular },
        ];
        assert!(FeatureManifest::new(specs, "x").is_err());
    }

    #[test]
    fn modality_set_text_form() {
        for set in ModalitySet::combinations() {
            assert_eq!(set.to_string().parse::<ModalitySet>().unwrap(), set);
        }
        assert_eq!("all".parse::<ModalitySet>().unwrap(), ModalitySet::ALL);
        assert!("".parse::<ModalitySet>().is_err());
        assert!("vitals".parse::<ModalitySet>().is_err());
    }

    fn sample_stay() -> PatientStay {
        let mut stay = bare_stay("p1", "2022-01-03 10:00", "2022-01-07 09:00");
        stay.labs = vec![m("potassium", 4.1, "2022-01-03 12:00"), m("potassium", 3.7, "2022-01-05 06:00")];
        stay.vitals = vec![
            m("heart_rate", 80.0, "2022-01-03 12:00"),
            m("heart_rate", 100.0, "2022-01-03 18:00"),
            m("heart_rate", 110.0, "2022-01-04 08:00"),
        ];
        stay.medications = vec![MedicationOrder {
            name: "vancomycin".into(),
            dose: "1 g".into(),
            route: Route::Intravenous,
            action: MedAction::Started,
            ts: ts("2022-01-04 09:00"),
        }];
        stay
    }

    #[test]
    fn stay_features_follow_imputation_rules() {
        let f = featurizer(FeatureConfig::default());
        let stay = sample_stay();
        let keys = enumerate_patient_days(&stay);
        let ops = OperationalStats::from_stays(std::slice::from_ref(&stay));
        let rows = f.featurize_stay(&stay, &keys, &ops).unwrap();
        assert_eq!(rows.len(), 4);
        let man = f.manifest();
        let col = |name: &str| man.position(name).unwrap();
        let k_avg: Vec<f64> = rows.iter().map(|r| r.values[col("potassium_avg")]).collect();
        assert_eq!(k_avg, vec![4.1, 4.1, 3.7, 3.7]);
        let hr_avg: Vec<f64> = rows.iter().map(|r| r.values[col("heart_rate_avg")]).collect();
        assert_eq!(hr_avg, vec![90.0, 110.0, 110.0, 110.0]);
        // Trend needs both days observed; day 2 is 110 - 90, the first day is missing -> 0.
        let hr_trend: Vec<f64> = rows.iter().map(|r| r.values[col("heart_rate_trend")]).collect();
        assert_eq!(hr_trend, vec![0.0, 20.0, 20.0, 20.0]);
        let lactate: Vec<f64> = rows.iter().map(|r| r.values[col("lactate_last")]).collect();
        assert_eq!(lactate, vec![0.0; 4]);
        let green: Vec<f64> = rows.iter().map(|r| r.values[col("med_green_active")]).collect();
        assert_eq!(green, vec![0.0, 1.0, 1.0, 1.0]);
        // Only day 2 has a text record; other days pool to zeros.
        let emb = col("text_emb_000");
        assert_eq!(rows[0].values[emb], 0.0);
        assert_ne!(rows[1].values[emb], 0.0);
        assert!(rows.iter().all(|r| r.values.iter().all(|v| v.is_finite())));
        assert!(rows.iter().all(|r| r.values.len() == 364));
    }

    #[test]
    fn later_records_never_change_earlier_days() {
        let f = featurizer(FeatureConfig::default());
        let stay = sample_stay();
        let keys = enumerate_patient_days(&stay);
        let ops = OperationalStats::from_stays(std::slice::from_ref(&stay));
        let base = f.featurize_stay(&stay, &keys, &ops).unwrap();
        let mut changed = stay.clone();
        changed.labs.push(m("lactate", 9.0, "2022-01-05 10:00"));
        changed.vitals.push(m("heart_rate", 150.0, "2022-01-05 11:00"));
        changed.sort_records();
        let after = f.featurize_stay(&changed, &keys, &ops).unwrap();
        assert_eq!(base[..2], after[..2]);
        assert_ne!(base[2], after[2]);
    }

    #[test]
    fn split_text_sources_doubles_embedding_block() {
        let f = featurizer(FeatureConfig {
            split_text_sources: true,
            ..FeatureConfig::default()
        });
        assert_eq!(f.manifest().count(Modality::Text), 4 + 2 * 312);
        let stay = sample_stay();
        let keys = enumerate_patient_days(&stay);
        let ops = OperationalStats::from_stays(std::slice::from_ref(&stay));
        let rows = f.featurize_stay(&stay, &keys, &ops).unwrap();
        let dx0 = f.manifest().position("dx_emb_000").unwrap();
        let med0 = f.manifest().position("med_emb_000").unwrap();
        assert_eq!(rows[1].values[dx0], 0.0);
        assert_ne!(rows[1].values[med0], 0.0);
    }

    #[test]
    fn table_round_trips_through_tsv() {
        let cfg = CohortConfig {
            n_patients: 15,
            ..CohortConfig::default()
        };
        let (stays, _) = apply_cohort_filters(generate_cohort(&cfg).unwrap());
        let f = featurizer(FeatureConfig::default());
        let ops = OperationalStats::from_stays(&stays);
        let table = build_feature_table(&f, &stays, &ops).unwrap();
        assert!(!table.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.tsv");
        table.write_tsv(&path).unwrap();
        let back = FeatureTable::read_tsv(&path).unwrap();
        assert_eq!(back.manifest.hash(), table.manifest.hash());
        assert_eq!(back, table);
    }

    #[test]
    fn failed_embeddings_are_left_out_of_the_pool() {
        struct Flaky(HashEmbedder);
        impl Embedder for Flaky {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn identity(&self) -> String {
                "flaky".into()
            }
            fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
                if text.contains("vancomycin") {
                    Err(EmbedError::Transport { attempts: 3, message: "down".into() })
                } else {
                    self.0.embed(text)
                }
            }
        }
        let f = Featurizer::new(
            FeatureConfig::default(),
            MedicationSignalConfig::default(),
            Arc::new(Flaky(HashEmbedder::new(8, 1))),
            PromptTemplate::default(),
        )
        .unwrap();
        let stay = sample_stay();
        let keys = enumerate_patient_days(&stay);
        let ops = OperationalStats::from_stays(std::slice::from_ref(&stay));
        let rows = f.featurize_stay(&stay, &keys, &ops).unwrap();
        let emb = f.manifest().position("text_emb_000").unwrap();
        assert_eq!(rows[1].values[emb], 0.0);
    }
}
