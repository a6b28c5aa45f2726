//! Weekly activity patterns and time-zone inference for frequent receivers.
//!
//! A pattern is the L1-normalized count of payments an entity received in
//! each hour of the week over one period, binned in a fixed reference zone.
//! Patterns of human-operated businesses share a daily shape, so rotating
//! each one onto a common template recovers relative time-zone offsets.

mod align;
mod zones;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::classify::{Category, MonthLabels};
use crate::cluster::EntityId;
use crate::ingest::{week_hour_of, Month, WEEK_HOURS};
use crate::payments::Payment;

pub use align::{
    align, column_median, mae, rotate, total_error, AlignParams, AlignmentResult, SHIFT_CANDIDATES,
};
pub use zones::{
    calibrate, circular_distance, estimate_shift, format_offset, read_anchors_csv, tz_distribution,
    wrap_hours, write_tz_distribution_csv, Calibration, NormalizationMode, TzDistribution,
};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("entity {entity} received no payments in {period}")]
    EmptyPattern { entity: EntityId, period: Period },
    #[error("alignment needs at least one pattern")]
    NoRows,
    #[error("pattern row {row} has {len} entries, expected {WEEK_HOURS}")]
    BadRowLength { row: usize, len: usize },
    #[error("no shifts to average")]
    NoShifts,
    #[error("shifts cancel out; circular mean undefined")]
    UndefinedMean,
    #[error("calibration needs at least one anchor with an estimated shift")]
    NoAnchors,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aggregation window for patterns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PeriodKind {
    #[default]
    Year,
    Month,
}

impl fmt::Display for PeriodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeriodKind::Year => "year",
            PeriodKind::Month => "month",
        })
    }
}

impl FromStr for PeriodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "year" => Ok(PeriodKind::Year),
            "month" => Ok(PeriodKind::Month),
            _ => Err(format!("expected `year` or `month`, got {s:?}")),
        }
    }
}

/// A UTC year or month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Period {
    Year(i32),
    Month(Month),
}

impl Period {
    pub fn of_month(month: Month, kind: PeriodKind) -> Self {
        match kind {
            PeriodKind::Year => Period::Year(month.year),
            PeriodKind::Month => Period::Month(month),
        }
    }

    pub fn of_timestamp(timestamp: i64, kind: PeriodKind) -> Self {
        Self::of_month(Month::of_timestamp(timestamp), kind)
    }

    pub fn year(self) -> i32 {
        match self {
            Period::Year(y) => y,
            Period::Month(m) => m.year,
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Period::Year(y) => write!(f, "{y}"),
            Period::Month(m) => m.fmt(f),
        }
    }
}

impl FromStr for Period {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.contains('-') && !s.starts_with('-') {
            s.parse().map(Period::Month)
        } else {
            s.parse()
                .map(Period::Year)
                .map_err(|_| format!("bad period {s:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeeklyPattern {
    pub entity: EntityId,
    pub period: Period,
    /// 168 non-negative values summing to 1; index 0 is Monday 00:00-01:00.
    pub w: Vec<f64>,
}

impl WeeklyPattern {
    pub fn zero_slots(&self) -> usize {
        self.w.iter().filter(|v| **v == 0.0).count()
    }
}

fn normalized(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Pattern of payments received by `entity` during `period`.
pub fn weekly_pattern(
    entity: EntityId,
    period: Period,
    kind: PeriodKind,
    payments: &[Payment],
    reference_offset: i32,
) -> Result<WeeklyPattern, TemporalError> {
    let mut counts = vec![0u64; WEEK_HOURS];
    for p in payments
        .iter()
        .filter(|p| p.dst == entity && Period::of_timestamp(p.timestamp, kind) == period)
    {
        counts[week_hour_of(p.timestamp, reference_offset)] += 1;
    }
    normalized(&counts)
        .map(|w| WeeklyPattern { entity, period, w })
        .ok_or(TemporalError::EmptyPattern { entity, period })
}

/// Entities labeled FR in at least one month of each period.
pub fn fr_entities_by_period(
    labels: &[MonthLabels],
    kind: PeriodKind,
) -> BTreeMap<Period, BTreeSet<EntityId>> {
    let mut out: BTreeMap<Period, BTreeSet<EntityId>> = BTreeMap::new();
    for ml in labels {
        let set = out.entry(Period::of_month(ml.month, kind)).or_default();
        set.extend(ml.with_category(Category::Fr));
    }
    out.retain(|_, s| !s.is_empty());
    out
}

/// Builds every requested pattern in one pass over `payments`, ordered by
/// period then entity. Entities without received payments are skipped.
pub fn build_patterns(
    payments: &[Payment],
    wanted: &BTreeMap<Period, BTreeSet<EntityId>>,
    kind: PeriodKind,
    reference_offset: i32,
) -> Vec<WeeklyPattern> {
    let mut counts: BTreeMap<(Period, EntityId), Vec<u64>> = BTreeMap::new();
    for p in payments {
        let period = Period::of_timestamp(p.timestamp, kind);
        if wanted.get(&period).is_some_and(|s| s.contains(&p.dst)) {
            counts
                .entry((period, p.dst))
                .or_insert_with(|| vec![0; WEEK_HOURS])
                [week_hour_of(p.timestamp, reference_offset)] += 1;
        }
    }
    counts
        .into_iter()
        .filter_map(|((period, entity), c)| {
            normalized(&c).map(|w| WeeklyPattern { entity, period, w })
        })
        .collect()
}

/// Keeps patterns with at most `max_zero_slots` empty hours.
pub fn filter_noisy(patterns: Vec<WeeklyPattern>, max_zero_slots: usize) -> Vec<WeeklyPattern> {
    patterns
        .into_iter()
        .filter(|p| p.zero_slots() <= max_zero_slots)
        .collect()
}

pub fn write_patterns_csv<W: Write>(mut w: W, patterns: &[WeeklyPattern]) -> std::io::Result<()> {
    write!(w, "entity_id,year")?;
    for h in 0..WEEK_HOURS {
        write!(w, ",h{h}")?;
    }
    writeln!(w)?;
    for p in patterns {
        write!(w, "{},{}", p.entity, p.period)?;
        for v in &p.w {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_patterns_csv<R: Read>(r: R) -> Result<Vec<WeeklyPattern>, TemporalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let malformed = |line: usize, reason: String| TemporalError::Malformed { line, reason };
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.len() != WEEK_HOURS + 2 || &headers[0] != "entity_id" || &headers[1] != "year" {
        return Err(malformed(
            1,
            "expected header entity_id,year,h0..h167".into(),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let entity = EntityId(
            rec[0]
                .parse()
                .map_err(|_| malformed(line, "bad entity_id".into()))?,
        );
        let period: Period = rec[1].parse().map_err(|e| malformed(line, e))?;
        let w = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(line, e.to_string()))?;
        out.push(WeeklyPattern { entity, period, w });
    }
    Ok(out)
}

/// Per-row outcome of an alignment, as persisted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignedRow {
    pub entity: EntityId,
    pub period: Period,
    pub shift: u8,
    pub mae_to_median: f64,
}

pub fn aligned_rows(patterns: &[WeeklyPattern], result: &AlignmentResult) -> Vec<AlignedRow> {
    patterns
        .iter()
        .zip(result.shifts.iter().zip(&result.row_errors))
        .map(|(p, (s, e))| AlignedRow {
            entity: p.entity,
            period: p.period,
            shift: *s,
            mae_to_median: *e,
        })
        .collect()
}

pub fn write_alignment_csv<W: Write>(mut w: W, rows: &[AlignedRow]) -> std::io::Result<()> {
    writeln!(w, "entity_id,year,shift,mae_to_median")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.entity, r.period, r.shift, r.mae_to_median
        )?;
    }
    Ok(())
}

pub fn read_alignment_csv<R: Read>(r: R) -> Result<Vec<AlignedRow>, TemporalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let malformed = |line: usize, reason: String| TemporalError::Malformed { line, reason };
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["entity_id", "year", "shift", "mae_to_median"] {
        return Err(malformed(1, format!("unexpected header {headers:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |what: &str| malformed(line, format!("bad {what}"));
            let shift: u8 = rec[2].parse().map_err(|_| bad("shift"))?;
            if shift > 23 {
                return Err(bad("shift"));
            }
            Ok(AlignedRow {
                entity: EntityId(rec[0].parse().map_err(|_| bad("entity_id"))?),
                period: rec[1].parse().map_err(|e: String| malformed(line, e))?,
                shift,
                mae_to_median: rec[3].parse().map_err(|_| bad("mae_to_median"))?,
            })
        })
        .collect()
}

pub fn write_iteration_log_csv<W: Write>(mut w: W, log: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(w, "iteration,total_error")?;
    for (it, e) in log {
        writeln!(w, "{it},{e}")?;
    }
    Ok(())
}

/// Signed per-row shifts grouped by entity, in period order.
pub fn shifts_by_entity(rows: &[AlignedRow]) -> BTreeMap<EntityId, Vec<(Period, u8)>> {
    let mut out: BTreeMap<EntityId, Vec<(Period, u8)>> = BTreeMap::new();
    for r in rows {
        out.entry(r.entity).or_default().push((r.period, r.shift));
    }
    for v in out.values_mut() {
        v.sort();
    }
    out
}
