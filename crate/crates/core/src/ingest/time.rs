use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate};

/// Hours in a week; index 0 is Monday 00:00-01:00 in the reference zone.
pub const WEEK_HOURS: usize = 168;

/// "Anywhere on Earth" is UTC-12.
pub const AOE_OFFSET_HOURS: i32 = -12;

const SECS_PER_HOUR: i64 = 3_600;
const SECS_PER_DAY: i64 = 86_400;

/// UTC calendar date of a timestamp.
pub fn utc_date(timestamp: i64) -> NaiveDate {
    DateTime::from_timestamp(timestamp, 0)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

/// Hour-of-week bucket in a zone `offset_hours` from UTC. Buckets are
/// half-open, so Monday 00:00:00 falls in bucket 0.
pub fn week_hour_of(timestamp: i64, offset_hours: i32) -> usize {
    let local = timestamp + i64::from(offset_hours) * SECS_PER_HOUR;
    let days = local.div_euclid(SECS_PER_DAY);
    // 1970-01-01 was a Thursday.
    let weekday = (days + 3).rem_euclid(7);
    let hour = local.rem_euclid(SECS_PER_DAY) / SECS_PER_HOUR;
    (weekday * 24 + hour) as usize
}

/// A UTC calendar month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn of_date(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn of_timestamp(timestamp: i64) -> Self {
        Self::of_date(utc_date(timestamp))
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }

    pub fn succ(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn days(self) -> u32 {
        (self.succ().first_day() - self.first_day()).num_days() as u32
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| format!("expected YYYY-MM, got {s:?}"))?;
        let year = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        Month::new(year, month).ok_or_else(|| format!("month out of range in {s:?}"))
    }
}

/// UTC month plus hour-of-week in the reference zone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeBucket {
    pub month: Month,
    pub week_hour: usize,
}

impl TimeBucket {
    pub fn of(timestamp: i64, offset_hours: i32) -> Self {
        Self {
            month: Month::of_timestamp(timestamp),
            week_hour: week_hour_of(timestamp, offset_hours),
        }
    }
}
