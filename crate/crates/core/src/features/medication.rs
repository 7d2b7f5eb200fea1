//! Green/yellow medication flags.
//!
//! Green medications are intravenous drugs that mark a sick patient; stopping
//! them or switching to the oral form suggests improvement. Yellow
//! medications are used around procedures, in the ICU or during emergency
//! responses. Name matching is case-insensitive and exact.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::cohort::{MedAction, MedicationOrder, Route, GREEN_MEDICATIONS, YELLOW_MEDICATIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationSignalConfig {
    pub green: BTreeSet<String>,
    pub yellow: BTreeSet<String>,
}

impl MedicationSignalConfig {
    pub fn new<I, J, S, T>(green: I, yellow: J) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let norm = |s: &str| s.trim().to_lowercase();
        let config = MedicationSignalConfig {
            green: green.into_iter().map(|s| norm(s.as_ref())).collect(),
            yellow: yellow.into_iter().map(|s| norm(s.as_ref())).collect(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if let Some(both) = self.green.intersection(&self.yellow).next() {
            return Err(FeatureError::Config(format!(
                "medication {both:?} is listed as both green and yellow"
            )));
        }
        Ok(())
    }

    /// Reads a TOML list file with `green = [...]` and `yellow = [...]`.
    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeatureError::Config(format!("{}: {e}", path.display())))?;
        let raw: MedicationSignalConfig = toml::from_str(&text)
            .map_err(|e| FeatureError::Config(format!("{}: {e}", path.display())))?;
        MedicationSignalConfig::new(raw.green, raw.yellow)
    }

    fn is_green(&self, name: &str) -> bool {
        self.green.contains(&name.trim().to_lowercase())
    }

    fn is_yellow(&self, name: &str) -> bool {
        self.yellow.contains(&name.trim().to_lowercase())
    }
}

impl Default for MedicationSignalConfig {
    fn default() -> Self {
        MedicationSignalConfig::new(
            GREEN_MEDICATIONS.iter().map(|m| m.0),
            YELLOW_MEDICATIONS.iter().map(|m| m.0),
        )
        .expect("built-in lists are disjoint")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MedicationFlags {
    pub green_active: bool,
    pub yellow_active: bool,
    pub green_deescalated: bool,
    pub yellow_then_green: bool,
}

impl MedicationFlags {
    pub const NAMES: [&'static str; 4] = [
        "med_green_active",
        "med_yellow_active",
        "med_green_deescalated",
        "med_yellow_then_green",
    ];

    pub fn to_row(self) -> [f64; 4] {
        [
            self.green_active,
            self.yellow_active,
            self.green_deescalated,
            self.yellow_then_green,
        ]
        .map(|b| f64::from(u8::from(b)))
    }
}

/// Flags for `day` from the orders charted up to that day's cut (sorted by time).
///
/// * `green_active`: some green drug's latest intravenous order is not a discontinuation.
/// * `yellow_active`: some yellow drug's latest order is not a discontinuation.
/// * `green_deescalated`: a green intravenous drug was discontinued on `day`
///   and no green intravenous drug is active at the cut.
/// * `yellow_then_green`: a green intravenous drug is active and some yellow
///   order predates that drug's latest order.
pub fn medication_signals(
    orders: &[MedicationOrder],
    config: &MedicationSignalConfig,
    day: NaiveDate,
) -> MedicationFlags {
    // (lowercased name, route) -> (active, time of latest order)
    let mut state: HashMap<(String, Route), (bool, NaiveDateTime)> = HashMap::new();
    let mut first_yellow: Option<NaiveDateTime> = None;
    let mut green_stopped_today = false;
    for order in orders {
        let green = config.is_green(&order.name);
        let yellow = config.is_yellow(&order.name);
        if !green && !yellow {
            continue;
        }
        if yellow && first_yellow.is_none() {
            first_yellow = Some(order.ts);
        }
        let active = order.action != MedAction::Discontinued;
        if green
            && order.route == Route::Intravenous
            && !active
            && order.ts.date() == day
        {
            green_stopped_today = true;
        }
        state.insert((order.name.trim().to_lowercase(), order.route), (active, order.ts));
    }

    let active_green_iv: Vec<NaiveDateTime> = state
        .iter()
        .filter(|((name, route), (active, _))| {
            *active && *route == Route::Intravenous && config.green.contains(name)
        })
        .map(|(_, (_, ts))| *ts)
        .collect();
    let green_active = !active_green_iv.is_empty();
    let yellow_active = state
        .iter()
        .any(|((name, _), (active, _))| *active && config.yellow.contains(name));
    let yellow_then_green = match first_yellow {
        Some(y) => active_green_iv.iter().any(|&g| y < g),
        None => false,
    };
    MedicationFlags {
        green_active,
        yellow_active,
        green_deescalated: green_stopped_today && !green_active,
        yellow_then_green,
    }
}
