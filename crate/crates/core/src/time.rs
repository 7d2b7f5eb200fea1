//! Minute-resolution timestamps and the daily data cut.

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};

/// Canonical on-disk timestamp format (timezone-naive, minute resolution).
pub const TS_FORMAT: &str = "%Y-%m-%d %H:%M";

/// The instant at which a day's data is frozen for scoring: 23:59 on that date.
pub fn day_cut(date: NaiveDate) -> NaiveDateTime {
    date.and_time(NaiveTime::from_hms_opt(23, 59, 0).expect("valid time"))
}

/// When alerts computed from a day's cut are published: 08:00 the next morning.
pub fn publish_time(date: NaiveDate) -> NaiveDateTime {
    (date + Duration::days(1)).and_time(NaiveTime::from_hms_opt(8, 0, 0).expect("valid time"))
}

/// Drops seconds and sub-second precision.
pub fn truncate_to_minute(ts: NaiveDateTime) -> NaiveDateTime {
    ts.with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .expect("zero seconds is always valid")
}

/// Parses the accepted timestamp spellings into a naive minute-resolution value.
///
/// Naive inputs are taken as hospital-local clock time. Inputs carrying an
/// explicit offset are converted to UTC before the offset is dropped.
pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    const NAIVE: [&str; 4] = [
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
    ];
    for fmt in NAIVE {
        if let Ok(ts) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(truncate_to_minute(ts));
        }
    }
    if let Ok(ts) = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S%.f") {
        return Some(truncate_to_minute(ts));
    }
    DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|dt| truncate_to_minute(dt.naive_utc()))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TS_FORMAT).to_string()
}

/// Serde adapter for `NaiveDateTime` in [`TS_FORMAT`].
pub mod ts_serde {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        parse_timestamp(&raw).ok_or_else(|| de::Error::custom(format!("bad timestamp {raw:?}")))
    }
}

/// Serde adapter for `Option<NaiveDateTime>` in [`TS_FORMAT`].
pub mod opt_ts_serde {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Option<NaiveDateTime>, s: S) -> Result<S::Ok, S::Error> {
        match ts {
            Some(ts) => s.serialize_str(&format_timestamp(*ts)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDateTime>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(raw) => parse_timestamp(&raw)
                .map(Some)
                .ok_or_else(|| de::Error::custom(format!("bad timestamp {raw:?}"))),
        }
    }
}
