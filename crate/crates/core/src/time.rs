//! Simulation clock: millisecond UTC instants anchored at a fixed epoch.

use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// Day 0 of every simulation starts at 2024-01-01T00:00:00Z.
pub const SIM_EPOCH_MS: i64 = 1_704_067_200_000;

const FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

/// A UTC instant with millisecond precision, stored as milliseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    /// Midnight UTC at the start of simulation day `day`.
    pub fn day_start(day: u32) -> Self {
        Timestamp(SIM_EPOCH_MS + i64::from(day) * MS_PER_DAY)
    }

    /// Instant `hours` (fractional allowed) after midnight of `day`, truncated to the millisecond.
    pub fn at_hour(day: u32, hours: f64) -> Self {
        Timestamp(Self::day_start(day).0 + (hours * MS_PER_HOUR as f64).round() as i64)
    }

    /// Simulation day this instant falls on. Instants before the epoch map to negative days.
    pub fn sim_day(self) -> i64 {
        (self.0 - SIM_EPOCH_MS).div_euclid(MS_PER_DAY)
    }

    pub fn plus_ms(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    pub fn parse(s: &str) -> Option<Self> {
        let naive = NaiveDateTime::parse_from_str(s, FORMAT).ok()?;
        let ts = Timestamp(naive.and_utc().timestamp_millis());
        // Reject non-canonical spellings so that parse and format stay bijective.
        (ts.to_string() == s).then_some(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => write!(f, "{}", dt.format(FORMAT)),
            None => write!(f, "<out of range: {} ms>", self.0),
        }
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "invalid timestamp {s:?}, expected YYYY-MM-DDTHH:MM:SS.mmmZ"
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_formats_as_expected() {
        assert_eq!(Timestamp::day_start(0).to_string(), "2024-01-01T00:00:00.000Z");
        assert_eq!(Timestamp::at_hour(0, 9.5).to_string(), "2024-01-01T09:30:00.000Z");
    }

    #[test]
    fn parse_inverts_display() {
        let ts = Timestamp(SIM_EPOCH_MS + 123_456_789);
        assert_eq!(Timestamp::parse(&ts.to_string()), Some(ts));
        assert_eq!(Timestamp::parse("2024-01-01T00:00:00Z"), None);
        assert_eq!(Timestamp::parse("garbage"), None);
    }

    #[test]
    fn sim_day_boundaries() {
        assert_eq!(Timestamp::day_start(3).sim_day(), 3);
        assert_eq!(Timestamp::day_start(3).plus_ms(-1).sim_day(), 2);
        assert_eq!(Timestamp(SIM_EPOCH_MS - 1).sim_day(), -1);
    }
}
