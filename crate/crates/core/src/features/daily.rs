use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

/// Summary of one measurement over one patient-day.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DailyStats {
    pub avg: Option<f64>,
    pub peak: Option<f64>,
    pub min: Option<f64>,
    pub last: Option<f64>,
    /// `avg - prev_avg`.
    pub trend: Option<f64>,
}

impl DailyStats {
    pub const FIELDS: [&'static str; 5] = ["avg", "peak", "min", "last", "trend"];

    /// Values in [`Self::FIELDS`] order, `NaN` for missing.
    pub fn to_row(&self) -> [f64; 5] {
        [self.avg, self.peak, self.min, self.last, self.trend].map(|v| v.unwrap_or(f64::NAN))
    }
}

/// Average, maximum, minimum, latest value and day-over-day change of the average.
///
/// `last` is the sample with the greatest timestamp (the later one in input
/// order on ties).
pub fn aggregate_day(samples: &[(f64, NaiveDateTime)], prev_avg: Option<f64>) -> DailyStats {
    let Some(&(first, first_ts)) = samples.first() else {
        return DailyStats::default();
    };
    let (mut sum, mut peak, mut min) = (0.0, f64::NEG_INFINITY, f64::INFINITY);
    let (mut last, mut last_ts) = (first, first_ts);
    for &(value, ts) in samples {
        sum += value;
        peak = peak.max(value);
        min = min.min(value);
        if ts >= last_ts {
            last = value;
            last_ts = ts;
        }
    }
    // The mean of values in [min, peak] can round just outside that range.
    let avg = (sum / samples.len() as f64).clamp(min, peak);
    DailyStats {
        avg: Some(avg),
        peak: Some(peak),
        min: Some(min),
        last: Some(last),
        trend: prev_avg.map(|p| avg - p),
    }
}

/// Fills gaps in a stay's day-by-feature matrix (rows chronological).
///
/// A missing (`NaN`) cell takes the latest earlier observed value of the same
/// column; cells with no earlier observation become 0.
pub fn impute(rows: &mut [Vec<f64>]) {
    let Some(width) = rows.first().map(Vec::len) else {
        return;
    };
    let mut carried = vec![f64::NAN; width];
    for row in rows.iter_mut() {
        debug_assert_eq!(row.len(), width);
        for (cell, carry) in row.iter_mut().zip(carried.iter_mut()) {
            if cell.is_nan() {
                *cell = if carry.is_nan() { 0.0 } else { *carry };
            } else {
                *carry = *cell;
            }
        }
    }
}
