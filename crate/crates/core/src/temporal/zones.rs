//! From relative shifts to GMT offsets: circular averaging, anchor
//! calibration and the per-year time-zone distribution.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use super::TemporalError;
use crate::cluster::EntityId;

const HOURS: f64 = 24.0;

/// Wraps hours into `[-12, 12)`.
pub fn wrap_hours(h: f64) -> f64 {
    (h + 12.0).rem_euclid(HOURS) - 12.0
}

pub fn circular_distance(a: f64, b: f64) -> f64 {
    wrap_hours(a - b).abs()
}

/// Table-style signed rendering, e.g. `+3.00`.
pub fn format_offset(h: f64) -> String {
    let v = if h.abs() < 0.005 { 0.0 } else { h };
    format!("{v:+.2}")
}

/// Circular mean of per-period shifts (each in `[0, 23]`, read as signed
/// `[-12, 11]`) plus `calibration`, wrapped into `[-12, 12)`.
pub fn estimate_shift(shifts: &[u8], calibration: f64) -> Result<f64, TemporalError> {
    if shifts.is_empty() {
        return Err(TemporalError::NoShifts);
    }
    let (mut x, mut y) = (0.0, 0.0);
    for &s in shifts {
        let a = f64::from(s) / HOURS * TAU;
        x += a.cos();
        y += a.sin();
    }
    let n = shifts.len() as f64;
    if x.hypot(y) / n < 1e-9 {
        return Err(TemporalError::UndefinedMean);
    }
    Ok(wrap_hours(y.atan2(x) / TAU * HOURS + calibration))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub offset: f64,
    /// `wrap(estimated + offset - truth)` per anchor, in input order.
    pub residuals: Vec<f64>,
}

impl Calibration {
    pub fn sum_abs(&self) -> f64 {
        self.residuals.iter().map(|r| r.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Constant offset minimizing the summed circular error between calibrated
/// estimates and true offsets. Ties on the sum go to the smallest maximum
/// residual, then to the offset closest to zero.
///
/// Anchors are `(estimated, truth)` pairs in hours.
pub fn calibrate(anchors: &[(f64, f64)]) -> Result<Calibration, TemporalError> {
    if anchors.is_empty() {
        return Err(TemporalError::NoAnchors);
    }
    let gaps: Vec<f64> = anchors.iter().map(|(e, t)| wrap_hours(t - e)).collect();
    // Both objectives are piecewise linear in the offset with kinks at the
    // gaps, their antipodes and pairwise midpoints.
    let mut candidates = Vec::with_capacity(2 * gaps.len() * (gaps.len() + 1));
    for (i, &a) in gaps.iter().enumerate() {
        candidates.push(a);
        candidates.push(a + 12.0);
        for &b in &gaps[i + 1..] {
            let mid = (a + b) / 2.0;
            candidates.push(mid);
            candidates.push(mid + 12.0);
        }
    }
    let cost = |off: f64| {
        gaps.iter().fold((0.0, 0.0_f64), |(s, m), g| {
            let d = circular_distance(off, *g);
            (s + d, m.max(d))
        })
    };
    const EPS: f64 = 1e-9;
    let mut best: Option<(f64, f64, f64)> = None;
    for off in candidates.into_iter().map(wrap_hours) {
        let (sum, max) = cost(off);
        let better = match best {
            None => true,
            Some((bs, bm, bo)) => {
                sum < bs - EPS
                    || (sum <= bs + EPS
                        && (max < bm - EPS
                            || (max <= bm + EPS && (off.abs(), off) < (bo.abs(), bo))))
            }
        };
        if better {
            best = Some((sum, max, off));
        }
    }
    let offset = best.expect("non-empty").2;
    Ok(Calibration {
        offset,
        residuals: anchors
            .iter()
            .map(|(e, t)| wrap_hours(e + offset - t))
            .collect(),
    })
}

/// Reads `entity_id,true_gmt_offset` (decimal hours).
pub fn read_anchors_csv<R: Read>(r: R) -> Result<Vec<(EntityId, f64)>, TemporalError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let malformed = |line: usize, reason: String| TemporalError::Malformed { line, reason };
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["entity_id", "true_gmt_offset"] {
        return Err(malformed(
            1,
            format!("expected header entity_id,true_gmt_offset, got {headers:?}"),
        ));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let entity = rec[0]
                .parse()
                .map_err(|_| malformed(line, "bad entity_id".into()))?;
            let off: f64 = rec[1]
                .parse()
                .map_err(|_| malformed(line, "bad true_gmt_offset".into()))?;
            if !(-12.0..=14.0).contains(&off) {
                return Err(malformed(line, format!("offset {off} outside [-12, 14]")));
            }
            Ok((EntityId(entity), off))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizationMode {
    Yearly,
    Global,
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::Yearly => "yearly",
            NormalizationMode::Global => "global",
        }
    }
}

/// Entity counts per year and whole-hour GMT offset, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct TzDistribution {
    pub mode: NormalizationMode,
    pub years: Vec<i32>,
    /// Column `k` is GMT offset `k - 12`.
    pub values: Vec<[f64; 24]>,
}

impl TzDistribution {
    pub fn value(&self, year: i32, gmt_offset: i32) -> Option<f64> {
        let row = self.years.iter().position(|y| *y == year)?;
        let col = usize::try_from(gmt_offset + 12).ok().filter(|c| *c < 24)?;
        Some(self.values[row][col])
    }
}

/// Counts whole-hour offsets (any integer, wrapped into `[-12, 11]`) per
/// year and normalizes per row or over the whole table. Rows or tables
/// without entities stay zero.
pub fn tz_distribution(
    offsets_by_year: &BTreeMap<i32, Vec<i32>>,
    mode: NormalizationMode,
) -> TzDistribution {
    let mut values: Vec<[f64; 24]> = offsets_by_year
        .values()
        .map(|offs| {
            let mut row = [0.0; 24];
            for o in offs {
                row[(o + 12).rem_euclid(24) as usize] += 1.0;
            }
            row
        })
        .collect();
    match mode {
        NormalizationMode::Yearly => {
            for row in &mut values {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        NormalizationMode::Global => {
            let s: f64 = values.iter().flatten().sum();
            if s > 0.0 {
                values.iter_mut().flatten().for_each(|v| *v /= s);
            }
        }
    }
    TzDistribution {
        mode,
        years: offsets_by_year.keys().copied().collect(),
        values,
    }
}

/// `year,gmt_offset,value`, offsets from -12 to +11.
pub fn write_tz_distribution_csv<W: Write>(mut w: W, d: &TzDistribution) -> std::io::Result<()> {
    writeln!(w, "year,gmt_offset,value")?;
    for (year, row) in d.years.iter().zip(&d.values) {
        for (k, v) in row.iter().enumerate() {
            writeln!(w, "{year},{},{v}", k as i32 - 12)?;
        }
    }
    Ok(())
}
