//! Per-output payments and the genuine-payment filters.
//!
//! Each output of a non-coinbase transaction is a candidate payment from the
//! transaction's source entity to the output's entity. Dispositions are
//! checked in a fixed order: change, missing price, dust, macro. Only outputs
//! that pass all of them are kept.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::AddAssign;
use std::str::FromStr;

use thiserror::Error;

use crate::cluster::{EntityId, EntityMap};
use crate::ingest::{
    usd_value, utc_date, FillPolicy, IngestError, Month, PriceTable, RawTransaction,
};

#[derive(Debug, Error)]
pub enum PaymentsError {
    #[error("tx {tx_id}: address {address:?} missing from entity map (stale map?)")]
    UnknownAddress { tx_id: String, address: String },
    #[error("tx {tx_id}: inputs span entities {first} and {other}; entity map is inconsistent with the stream")]
    InconsistentInputs {
        tx_id: String,
        first: EntityId,
        other: EntityId,
    },
    #[error("payments line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// USD bounds for genuine payments; both ends inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub min_usd: f64,
    pub max_usd: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_usd: 0.5,
            max_usd: 10_000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Disposition {
    Kept,
    Change,
    MissingPrice,
    Dust,
    Macro,
}

impl Disposition {
    pub const ALL: [Disposition; 5] = [
        Disposition::Kept,
        Disposition::Change,
        Disposition::MissingPrice,
        Disposition::Dust,
        Disposition::Macro,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Kept => "kept",
            Disposition::Change => "change",
            Disposition::MissingPrice => "missing_price",
            Disposition::Dust => "dust",
            Disposition::Macro => "macro",
        }
    }
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Disposition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Disposition::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown disposition {s:?}"))
    }
}

/// One genuine transfer between two distinct entities.
#[derive(Clone, Debug, PartialEq)]
pub struct Payment {
    pub timestamp: i64,
    pub src: EntityId,
    pub dst: EntityId,
    pub value_sats: u64,
    pub value_usd: f64,
}

impl Payment {
    pub fn month(&self) -> Month {
        Month::of_timestamp(self.timestamp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterCounts {
    pub kept: u64,
    pub change: u64,
    pub missing_price: u64,
    pub dust: u64,
    pub macro_: u64,
}

impl FilterCounts {
    pub fn total(&self) -> u64 {
        self.kept + self.change + self.missing_price + self.dust + self.macro_
    }

    pub fn get(&self, d: Disposition) -> u64 {
        match d {
            Disposition::Kept => self.kept,
            Disposition::Change => self.change,
            Disposition::MissingPrice => self.missing_price,
            Disposition::Dust => self.dust,
            Disposition::Macro => self.macro_,
        }
    }

    fn slot(&mut self, d: Disposition) -> &mut u64 {
        match d {
            Disposition::Kept => &mut self.kept,
            Disposition::Change => &mut self.change,
            Disposition::MissingPrice => &mut self.missing_price,
            Disposition::Dust => &mut self.dust,
            Disposition::Macro => &mut self.macro_,
        }
    }

    pub fn record(&mut self, d: Disposition) {
        *self.slot(d) += 1;
    }
}

impl AddAssign for FilterCounts {
    fn add_assign(&mut self, rhs: Self) {
        for d in Disposition::ALL {
            *self.slot(d) += rhs.get(d);
        }
    }
}

/// Disposition counts per UTC month. Totals count every output scanned;
/// coinbase outputs are never scanned.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub by_month: BTreeMap<Month, FilterCounts>,
}

impl FilterReport {
    pub fn totals(&self) -> FilterCounts {
        let mut all = FilterCounts::default();
        for c in self.by_month.values() {
            all += *c;
        }
        all
    }

    pub fn merge(&mut self, other: &FilterReport) {
        for (m, c) in &other.by_month {
            *self.by_month.entry(*m).or_default() += *c;
        }
    }

    pub fn total_series(&self) -> BTreeMap<Month, u64> {
        self.by_month.iter().map(|(m, c)| (*m, c.total())).collect()
    }

    pub fn kept_series(&self) -> BTreeMap<Month, u64> {
        self.by_month.iter().map(|(m, c)| (*m, c.kept)).collect()
    }

    /// One row per month per disposition: `year,month,disposition,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "year,month,disposition,count")?;
        for (m, c) in &self.by_month {
            for d in Disposition::ALL {
                writeln!(w, "{},{},{},{}", m.year, m.month, d, c.get(d))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, PaymentsError> {
        let mut report = FilterReport::default();
        for (line, rec) in csv_records(r, &["year", "month", "disposition", "count"])? {
            let month = parse_month(&rec[0], &rec[1]).map_err(|reason| malformed(line, reason))?;
            let d: Disposition = rec[2].parse().map_err(|e| malformed(line, e))?;
            let n: u64 = rec[3]
                .parse()
                .map_err(|_| malformed(line, format!("bad count {:?}", &rec[3])))?;
            *report.by_month.entry(month).or_default().slot(d) += n;
        }
        Ok(report)
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> PaymentsError {
    PaymentsError::Malformed {
        line,
        reason: reason.into(),
    }
}

fn parse_month(year: &str, month: &str) -> Result<Month, String> {
    let y: i32 = year.parse().map_err(|_| format!("bad year {year:?}"))?;
    let m: u32 = month.parse().map_err(|_| format!("bad month {month:?}"))?;
    Month::new(y, m).ok_or_else(|| format!("month out of range: {m}"))
}

fn csv_records<R: Read>(
    r: R,
    header: &[&str],
) -> Result<Vec<(usize, csv::StringRecord)>, PaymentsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let found = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(malformed(
            1,
            format!("expected header {}, got {found:?}", header.join(",")),
        ));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
            Ok((rec.position().map_or(0, |p| p.line() as usize), rec))
        })
        .collect()
}

/// Source entity of a non-coinbase transaction. All inputs must agree.
fn source_entity(tx: &RawTransaction, map: &EntityMap) -> Result<EntityId, PaymentsError> {
    let lookup = |address: &str| {
        map.get(address)
            .ok_or_else(|| PaymentsError::UnknownAddress {
                tx_id: tx.tx_id.clone(),
                address: address.to_owned(),
            })
    };
    let first = lookup(&tx.inputs[0].address)?;
    for input in &tx.inputs[1..] {
        let other = lookup(&input.address)?;
        if other != first {
            return Err(PaymentsError::InconsistentInputs {
                tx_id: tx.tx_id.clone(),
                first,
                other,
            });
        }
    }
    Ok(first)
}

/// Disposition of a single candidate output. `value_usd` is `None` when no
/// price was available.
pub fn disposition(
    src: EntityId,
    dst: EntityId,
    value_usd: Option<f64>,
    thresholds: &Thresholds,
) -> Disposition {
    if src == dst {
        return Disposition::Change;
    }
    match value_usd {
        None => Disposition::MissingPrice,
        Some(v) if v < thresholds.min_usd => Disposition::Dust,
        Some(v) if v > thresholds.max_usd => Disposition::Macro,
        Some(_) => Disposition::Kept,
    }
}

/// Turns transactions into genuine payments, counting every output's fate.
pub fn extract_payments(
    txs: &[RawTransaction],
    map: &EntityMap,
    prices: &PriceTable,
    thresholds: &Thresholds,
    fill: FillPolicy,
) -> Result<(Vec<Payment>, FilterReport), PaymentsError> {
    let mut payments = Vec::new();
    let mut report = FilterReport::default();
    for tx in txs.iter().filter(|tx| !tx.is_coinbase()) {
        let src = source_entity(tx, map)?;
        let date = utc_date(tx.timestamp);
        let price = match prices.price_on(date, fill) {
            Ok(p) => Some(p),
            Err(IngestError::MissingPrice(_)) => None,
            Err(e) => unreachable!("price lookup only fails with MissingPrice: {e}"),
        };
        let counts = report.by_month.entry(Month::of_date(date)).or_default();
        for out in &tx.outputs {
            let dst = map
                .get(&out.address)
                .ok_or_else(|| PaymentsError::UnknownAddress {
                    tx_id: tx.tx_id.clone(),
                    address: out.address.clone(),
                })?;
            let value_usd = price
                .map(|_| usd_value(out.value, date, prices, fill).expect("price checked above"));
            let d = disposition(src, dst, value_usd, thresholds);
            counts.record(d);
            if d == Disposition::Kept {
                payments.push(Payment {
                    timestamp: tx.timestamp,
                    src,
                    dst,
                    value_sats: out.value,
                    value_usd: value_usd.expect("kept implies priced"),
                });
            }
        }
    }
    Ok((payments, report))
}

/// Kept over total outputs per month; 0 for months with no outputs.
pub fn total_vs_filtered_ratio(
    totals: &BTreeMap<Month, u64>,
    kept: &BTreeMap<Month, u64>,
) -> BTreeMap<Month, f64> {
    totals
        .keys()
        .chain(kept.keys())
        .map(|m| {
            let t = totals.get(m).copied().unwrap_or(0);
            let k = kept.get(m).copied().unwrap_or(0);
            let r = if t == 0 { 0.0 } else { k as f64 / t as f64 };
            (*m, r)
        })
        .collect()
}

pub fn write_payments_csv<W: Write>(mut w: W, payments: &[Payment]) -> std::io::Result<()> {
    writeln!(w, "timestamp,src_entity,dst_entity,value_sats,value_usd")?;
    for p in payments {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.timestamp, p.src, p.dst, p.value_sats, p.value_usd
        )?;
    }
    Ok(())
}

pub fn read_payments_csv<R: Read>(r: R) -> Result<Vec<Payment>, PaymentsError> {
    let header = [
        "timestamp",
        "src_entity",
        "dst_entity",
        "value_sats",
        "value_usd",
    ];
    csv_records(r, &header)?
        .into_iter()
        .map(|(line, rec)| {
            let field = |i: usize| &rec[i];
            let bad = |i: usize| malformed(line, format!("bad {} {:?}", header[i], field(i)));
            Ok(Payment {
                timestamp: field(0).parse().map_err(|_| bad(0))?,
                src: EntityId(field(1).parse().map_err(|_| bad(1))?),
                dst: EntityId(field(2).parse().map_err(|_| bad(2))?),
                value_sats: field(3).parse().map_err(|_| bad(3))?,
                value_usd: field(4).parse().map_err(|_| bad(4))?,
            })
        })
        .collect()
}
