//! Virtual time.
//!
//! All device behavior is driven by a logical clock measured in
//! milliseconds. Nothing in the engine reads the wall clock; time advances
//! only because requests (in particular `tick` requests) carry a
//! `virtual_now` timestamp. This keeps campaigns deterministic and lets a
//! two-hour experiment replay in seconds.

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

/// Milliseconds of virtual time. The origin is the Unix epoch so that
/// human-readable dates in model files and payloads convert directly.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

pub const MS_PER_SECOND: u64 = 1_000;
pub const MS_PER_MINUTE: u64 = 60 * MS_PER_SECOND;
pub const MS_PER_HOUR: u64 = 60 * MS_PER_MINUTE;
pub const MS_PER_DAY: u64 = 24 * MS_PER_HOUR;

impl VirtualTime {
    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, ms: u64) -> VirtualTime {
        VirtualTime(self.0 + ms)
    }

    /// Parses `YYYY-MM-DD` (midnight) or `YYYY-MM-DDTHH:MM[:SS]`.
    pub fn parse(text: &str) -> Option<VirtualTime> {
        let dt = if let Ok(d) = NaiveDate::parse_from_str(text, "%Y-%m-%d") {
            d.and_hms_opt(0, 0, 0)?
        } else if let Ok(dt) = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S") {
            dt
        } else if let Ok(dt) = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M") {
            dt
        } else {
            return None;
        };
        let ms = dt.and_utc().timestamp_millis();
        if ms < 0 {
            return None;
        }
        Some(VirtualTime(ms as u64))
    }

    pub fn format(self) -> String {
        match chrono::DateTime::from_timestamp_millis(self.0 as i64) {
            Some(dt) => dt.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string(),
            None => format!("+{}ms", self.0),
        }
    }
}

/// A time of day such as `08:30`, kept as minutes since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeOfDay(pub u16);

impl TimeOfDay {
    pub fn parse(text: &str) -> Option<TimeOfDay> {
        let t = NaiveTime::parse_from_str(text, "%H:%M").ok()?;
        Some(TimeOfDay((t.hour() * 60 + t.minute()) as u16))
    }

    pub fn as_millis(self) -> u64 {
        self.0 as u64 * MS_PER_MINUTE
    }

    pub fn format(self) -> String {
        format!("{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

/// Parses a duration literal: an integer followed by `ms`, `s`, `m`, `h`
/// or `d` (for example `30m`).
pub fn parse_duration_ms(text: &str) -> Option<u64> {
    let split = text.find(|c: char| !c.is_ascii_digit())?;
    let (num, unit) = text.split_at(split);
    let n: u64 = num.parse().ok()?;
    let scale = match unit {
        "ms" => 1,
        "s" => MS_PER_SECOND,
        "m" => MS_PER_MINUTE,
        "h" => MS_PER_HOUR,
        "d" => MS_PER_DAY,
        _ => return None,
    };
    Some(n * scale)
}

pub fn format_duration_ms(ms: u64) -> String {
    if ms == 0 {
        return "0ms".to_string();
    }
    for (scale, unit) in [
        (MS_PER_DAY, "d"),
        (MS_PER_HOUR, "h"),
        (MS_PER_MINUTE, "m"),
        (MS_PER_SECOND, "s"),
    ] {
        if ms % scale == 0 {
            return format!("{}{}", ms / scale, unit);
        }
    }
    format!("{ms}ms")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dates_and_datetimes() {
        let midnight = VirtualTime::parse("2026-01-01").unwrap();
        let morning = VirtualTime::parse("2026-01-01T08:30").unwrap();
        assert_eq!(morning.0 - midnight.0, 8 * MS_PER_HOUR + 30 * MS_PER_MINUTE);
        assert_eq!(morning.format(), "2026-01-01T08:30:00");
        assert!(VirtualTime::parse("not a date").is_none());
    }

    #[test]
    fn time_of_day_round_trips() {
        let t = TimeOfDay::parse("20:45").unwrap();
        assert_eq!(t.0, 20 * 60 + 45);
        assert_eq!(t.format(), "20:45");
        assert!(TimeOfDay::parse("25:00").is_none());
    }

    #[test]
    fn duration_literals() {
        assert_eq!(parse_duration_ms("30m"), Some(30 * MS_PER_MINUTE));
        assert_eq!(parse_duration_ms("2s"), Some(2000));
        assert_eq!(parse_duration_ms("1d"), Some(MS_PER_DAY));
        assert_eq!(parse_duration_ms("5x"), None);
        assert_eq!(format_duration_ms(30 * MS_PER_MINUTE), "30m");
        assert_eq!(format_duration_ms(1500), "1500ms");
    }
}
