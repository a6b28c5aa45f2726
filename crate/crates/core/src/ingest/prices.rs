use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;

use super::IngestError;

pub const SATS_PER_BTC: f64 = 100_000_000.0;

/// Daily USD price of one BTC, keyed by UTC date.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriceTable {
    entries: BTreeMap<NaiveDate, f64>,
}

impl PriceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a price, rejecting non-positive values and repeated dates.
    pub fn insert(&mut self, date: NaiveDate, usd_per_btc: f64) -> Result<(), IngestError> {
        if !(usd_per_btc > 0.0 && usd_per_btc.is_finite()) {
            return Err(IngestError::NonPositivePrice {
                line: 0,
                date,
                price: usd_per_btc,
            });
        }
        if self.entries.insert(date, usd_per_btc).is_some() {
            return Err(IngestError::MalformedRecord {
                line: 0,
                reason: format!("duplicate date {date}"),
            });
        }
        Ok(())
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.entries.get(&date).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.entries.iter().map(|(d, p)| (*d, *p))
    }

    /// Price to use for `date` under `policy`.
    pub fn price_on(&self, date: NaiveDate, policy: FillPolicy) -> Result<f64, IngestError> {
        if let Some(p) = self.get(date) {
            return Ok(p);
        }
        match policy {
            FillPolicy::Strict => Err(IngestError::MissingPrice(date)),
            FillPolicy::Forward { max_days } => self
                .entries
                .range(..date)
                .next_back()
                .filter(|(d, _)| (date - **d).num_days() <= i64::from(max_days))
                .map(|(_, p)| *p)
                .ok_or(IngestError::MissingPrice(date)),
        }
    }
}

/// How to treat dates absent from the price table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FillPolicy {
    #[default]
    Strict,
    /// Use the most recent earlier price at most `max_days` old.
    Forward { max_days: u32 },
}

impl fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FillPolicy::Strict => f.write_str("strict"),
            FillPolicy::Forward { max_days } => write!(f, "forward:{max_days}"),
        }
    }
}

impl FromStr for FillPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "strict" => Ok(FillPolicy::Strict),
            other => other
                .strip_prefix("forward:")
                .and_then(|d| d.parse().ok())
                .map(|max_days| FillPolicy::Forward { max_days })
                .ok_or_else(|| format!("expected `strict` or `forward:<days>`, got {s:?}")),
        }
    }
}

/// `sats` converted to USD at the price of `date`.
pub fn usd_value(
    sats: u64,
    date: NaiveDate,
    prices: &PriceTable,
    policy: FillPolicy,
) -> Result<f64, IngestError> {
    let price = prices.price_on(date, policy)?;
    Ok(sats as f64 / SATS_PER_BTC * price)
}

/// Reads a `date,usd_per_btc` CSV.
pub fn parse_prices<R: Read>(reader: R) -> Result<PriceTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(e, 1))?.clone();
    if headers.len() != 2 || &headers[0] != "date" || &headers[1] != "usd_per_btc" {
        return Err(IngestError::MalformedRecord {
            line: 1,
            reason: format!("expected header `date,usd_per_btc`, got {headers:?}"),
        });
    }
    let mut table = PriceTable::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let malformed = |reason: String| IngestError::MalformedRecord { line, reason };
        if record.len() != 2 {
            return Err(malformed(format!(
                "expected 2 fields, got {}",
                record.len()
            )));
        }
        let date: NaiveDate = record[0]
            .parse()
            .map_err(|e| malformed(format!("bad date {:?}: {e}", &record[0])))?;
        let price: f64 = record[1]
            .parse()
            .map_err(|e| malformed(format!("bad price {:?}: {e}", &record[1])))?;
        table.insert(date, price).map_err(|e| match e {
            IngestError::NonPositivePrice { date, price, .. } => {
                IngestError::NonPositivePrice { line, date, price }
            }
            IngestError::MalformedRecord { reason, .. } => malformed(reason),
            other => other,
        })?;
    }
    Ok(table)
}

fn csv_err(e: csv::Error, fallback_line: usize) -> IngestError {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    IngestError::MalformedRecord {
        line,
        reason: e.to_string(),
    }
}

pub fn write_prices<W: Write>(mut writer: W, table: &PriceTable) -> std::io::Result<()> {
    writeln!(writer, "date,usd_per_btc")?;
    for (date, price) in table.iter() {
        writeln!(writer, "{date},{price}")?;
    }
    Ok(())
}
