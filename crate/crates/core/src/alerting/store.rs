//! On-disk layout under a data directory:
//!
//! ```text
//! alerts/<date>.jsonl        one AlertRecord per line, sorted by patient id
//! alerts/index.json          date -> RunIndexEntry
//! explanations/<date>.jsonl  one ExplanationRecord per line
//! feedback.jsonl             append-only FeedbackEntry ledger
//! ```
//!
//! Run files are written once. Writing identical bytes again is a no-op and
//! writing different bytes for an existing date is refused.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AlertError, AlertRecord, FeedbackAck, FeedbackEntry, TierCounts, Verdict};
use crate::cohort::PatientDayKey;
use crate::explain::ExplanationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndexEntry {
    pub file: String,
    pub n_alerts: usize,
    pub counts: TierCounts,
    pub sha256: String,
    pub manifest_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    Unchanged,
}

/// Filters for ledger queries; bounds are inclusive and apply to the alert date.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackQuery {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub verdict: Option<Verdict>,
}

pub struct AlertStore {
    root: PathBuf,
    /// Serializes every write; readers only ever see complete files.
    writer: Mutex<()>,
}

impl AlertStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, AlertError> {
        let root = root.into();
        fs::create_dir_all(root.join("alerts"))?;
        fs::create_dir_all(root.join("explanations"))?;
        Ok(AlertStore {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_path(&self, date: NaiveDate) -> PathBuf {
        self.root.join("alerts").join(format!("{date}.jsonl"))
    }

    fn explanation_path(&self, date: NaiveDate) -> PathBuf {
        self.root.join("explanations").join(format!("{date}.jsonl"))
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("alerts").join("index.json")
    }

    fn ledger_path(&self) -> PathBuf {
        self.root.join("feedback.jsonl")
    }

    pub fn index(&self) -> Result<BTreeMap<NaiveDate, RunIndexEntry>, AlertError> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| corrupt(&path, e))
    }

    pub fn run_dates(&self) -> Result<Vec<NaiveDate>, AlertError> {
        Ok(self.index()?.into_keys().collect())
    }

    /// Persists one run. Alerts are stored sorted by patient id.
    pub fn write_run(
        &self,
        date: NaiveDate,
        alerts: &[AlertRecord],
        manifest_hash: &str,
    ) -> Result<WriteOutcome, AlertError> {
        let mut sorted = alerts.to_vec();
        sorted.sort_by(|a, b| a.patient_day.cmp(&b.patient_day));
        let bytes = encode_lines(&sorted)?;
        let _guard = self.writer.lock().expect("store writer poisoned");
        let path = self.run_path(date);
        let outcome = write_once(&path, &bytes, date)?;
        let mut index = self.index()?;
        if outcome == WriteOutcome::Written || !index.contains_key(&date) {
            let mut counts = TierCounts::default();
            sorted.iter().for_each(|a| counts.add(a.tier));
            index.insert(
                date,
                RunIndexEntry {
                    file: format!("{date}.jsonl"),
                    n_alerts: sorted.len(),
                    counts,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    manifest_hash: manifest_hash.to_string(),
                },
            );
            let json = serde_json::to_vec_pretty(&index).map_err(|e| corrupt(&self.index_path(), e))?;
            replace_atomically(&self.index_path(), &json)?;
        }
        Ok(outcome)
    }

    pub fn load_run(&self, date: NaiveDate) -> Result<Option<Vec<AlertRecord>>, AlertError> {
        let path = self.run_path(date);
        if !path.exists() {
            return Ok(None);
        }
        read_lines(&path).map(Some)
    }

    pub fn find_alert(&self, key: &PatientDayKey) -> Result<Option<AlertRecord>, AlertError> {
        Ok(self
            .load_run(key.date)?
            .and_then(|run| run.into_iter().find(|a| a.patient_day == *key)))
    }

    /// Every stored alert, by date then patient id.
    pub fn all_alerts(&self) -> Result<Vec<AlertRecord>, AlertError> {
        let mut out = Vec::new();
        for date in self.run_dates()? {
            out.extend(self.load_run(date)?.unwrap_or_default());
        }
        Ok(out)
    }

    /// A patient's alerts across all runs, oldest first.
    pub fn risk_history(&self, patient_id: &str) -> Result<Vec<AlertRecord>, AlertError> {
        Ok(self
            .all_alerts()?
            .into_iter()
            .filter(|a| a.patient_day.patient_id == patient_id)
            .collect())
    }

    pub fn write_explanations(
        &self,
        date: NaiveDate,
        records: &[ExplanationRecord],
    ) -> Result<WriteOutcome, AlertError> {
        let mut sorted = records.to_vec();
        sorted.sort_by(|a, b| a.patient_day.cmp(&b.patient_day));
        let bytes = encode_lines(&sorted)?;
        let _guard = self.writer.lock().expect("store writer poisoned");
        write_once(&self.explanation_path(date), &bytes, date)
    }

    pub fn load_explanation(&self, key: &PatientDayKey) -> Result<Option<ExplanationRecord>, AlertError> {
        let path = self.explanation_path(key.date);
        if !path.exists() {
            return Ok(None);
        }
        let wanted = key.to_string();
        Ok(read_lines::<ExplanationRecord>(&path)?
            .into_iter()
            .find(|r| r.patient_day == wanted))
    }

    /// Appends a feedback entry after checking that its alert exists.
    pub fn record_feedback(&self, entry: &FeedbackEntry) -> Result<FeedbackAck, AlertError> {
        if entry.author.trim().is_empty() {
            return Err(AlertError::Feedback("author must not be empty".into()));
        }
        let _guard = self.writer.lock().expect("store writer poisoned");
        if self.find_alert(&entry.patient_day)?.is_none() {
            return Err(AlertError::UnknownAlert(entry.patient_day.to_string()));
        }
        let path = self.ledger_path();
        let sequence = if path.exists() {
            BufReader::new(File::open(&path)?).lines().count()
        } else {
            0
        };
        let mut line = serde_json::to_string(entry).map_err(|e| corrupt(&path, e))?;
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        Ok(FeedbackAck {
            sequence,
            patient_day: entry.patient_day.clone(),
        })
    }

    /// Matching ledger entries ordered by (timestamp, author), ties in append order.
    pub fn feedback(&self, query: &FeedbackQuery) -> Result<Vec<FeedbackEntry>, AlertError> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut entries: Vec<FeedbackEntry> = read_lines::<FeedbackEntry>(&path)?
            .into_iter()
            .filter(|e| {
                let d = e.patient_day.date;
                query.from.map_or(true, |f| d >= f)
                    && query.to.map_or(true, |t| d <= t)
                    && query.verdict.map_or(true, |v| e.verdict == v)
            })
            .collect();
        entries.sort_by(|a, b| (a.ts, &a.author).cmp(&(b.ts, &b.author)));
        Ok(entries)
    }
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> AlertError {
    AlertError::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn encode_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>, AlertError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| AlertError::Corrupt {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AlertError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_once(path: &Path, bytes: &[u8], date: NaiveDate) -> Result<WriteOutcome, AlertError> {
    if path.exists() {
        return if fs::read(path)? == bytes {
            Ok(WriteOutcome::Unchanged)
        } else {
            Err(AlertError::Conflict { date })
        };
    }
    replace_atomically(path, bytes)?;
    Ok(WriteOutcome::Written)
}

fn replace_atomically(path: &Path, bytes: &[u8]) -> Result<(), AlertError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
