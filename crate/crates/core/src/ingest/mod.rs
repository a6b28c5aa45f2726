//! Transaction stream and price table ingestion.
//!
//! Transactions arrive as JSONL, one object per line:
//!
//! ```text
//! {"tx_id":"t1","timestamp":1514808000,"inputs":[{"address":"a","value":5}],"outputs":[{"address":"b","value":4}]}
//! ```
//!
//! A coinbase transaction carries an empty `inputs` list. Prices are a CSV
//! table `date,usd_per_btc` keyed by UTC calendar date.

mod prices;
mod time;

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prices::{parse_prices, usd_value, write_prices, FillPolicy, PriceTable, SATS_PER_BTC};
pub use time::{utc_date, week_hour_of, Month, TimeBucket, AOE_OFFSET_HOURS, WEEK_HOURS};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate tx_id {tx_id:?}")]
    DuplicateTxId { line: usize, tx_id: String },
    #[error("line {line}: non-positive price {price} for {date}")]
    NonPositivePrice {
        line: usize,
        date: NaiveDate,
        price: f64,
    },
    #[error("no usable price for {0}")]
    MissingPrice(NaiveDate),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl IngestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::MalformedRecord { line, .. }
            | IngestError::DuplicateTxId { line, .. }
            | IngestError::NonPositivePrice { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// One side of a transaction: an address and an amount in satoshis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxIo {
    pub address: String,
    pub value: u64,
}

impl TxIo {
    pub fn new(address: impl Into<String>, value: u64) -> Self {
        Self {
            address: address.into(),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTransaction {
    pub tx_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub inputs: Vec<TxIo>,
    pub outputs: Vec<TxIo>,
}

impl RawTransaction {
    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<(), String> {
        if self.tx_id.is_empty() {
            return Err("empty tx_id".into());
        }
        if self.outputs.is_empty() {
            return Err("outputs list is empty".into());
        }
        if let Some(io) = self
            .inputs
            .iter()
            .chain(&self.outputs)
            .find(|io| io.address.is_empty())
        {
            return Err(format!("empty address (value {})", io.value));
        }
        Ok(())
    }
}

/// Parses and validates a single JSONL record. Duplicate detection is the
/// caller's job since it needs the whole stream.
pub fn parse_transaction_line(line: &str, line_no: usize) -> Result<RawTransaction, IngestError> {
    let tx: RawTransaction =
        serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
    tx.validate()
        .map_err(|reason| IngestError::MalformedRecord {
            line: line_no,
            reason,
        })?;
    Ok(tx)
}

/// Result of scanning a stream without aborting on bad records.
#[derive(Debug, Default)]
pub struct TxScan {
    pub transactions: Vec<RawTransaction>,
    /// Line number of every accepted transaction, parallel to `transactions`.
    pub lines: Vec<usize>,
    /// Every rejected record, in file order.
    pub problems: Vec<IngestError>,
}

impl TxScan {
    /// Scans a chunk of JSONL text whose first line has number `first_line`
    /// (1-based). Blank lines are not records and are skipped.
    pub fn from_str_chunk(text: &str, first_line: usize) -> Self {
        let mut scan = TxScan::default();
        for (offset, line) in text.lines().enumerate() {
            scan.push_line(line, first_line + offset);
        }
        scan.dedup();
        scan
    }

    pub fn from_reader<R: BufRead>(reader: R) -> io::Result<Self> {
        let mut scan = TxScan::default();
        for (idx, line) in reader.lines().enumerate() {
            scan.push_line(&line?, idx + 1);
        }
        scan.dedup();
        Ok(scan)
    }

    fn push_line(&mut self, line: &str, line_no: usize) {
        if line.trim().is_empty() {
            return;
        }
        match parse_transaction_line(line, line_no) {
            Ok(tx) => {
                self.transactions.push(tx);
                self.lines.push(line_no);
            }
            Err(e) => self.problems.push(e),
        }
    }

    /// Moves repeated tx_ids (after their first occurrence) into `problems`.
    fn dedup(&mut self) {
        let mut seen = HashSet::with_capacity(self.transactions.len());
        let mut keep_tx = Vec::with_capacity(self.transactions.len());
        let mut keep_lines = Vec::with_capacity(self.lines.len());
        for (tx, line) in self.transactions.drain(..).zip(self.lines.drain(..)) {
            if seen.insert(tx.tx_id.clone()) {
                keep_tx.push(tx);
                keep_lines.push(line);
            } else {
                self.problems.push(IngestError::DuplicateTxId {
                    line,
                    tx_id: tx.tx_id,
                });
            }
        }
        self.transactions = keep_tx;
        self.lines = keep_lines;
        self.problems.sort_by_key(|p| p.line().unwrap_or(0));
    }

    /// Concatenates two scans of consecutive chunks of one stream. The result
    /// equals scanning the concatenated text in one pass.
    pub fn merge(mut self, other: TxScan) -> TxScan {
        self.transactions.extend(other.transactions);
        self.lines.extend(other.lines);
        self.problems.extend(other.problems);
        self.dedup();
        self
    }

    pub fn malformed_count(&self) -> usize {
        self.problems.len()
    }

    /// Strict view: the transactions, or the first problem in file order.
    pub fn into_result(self) -> Result<Vec<RawTransaction>, IngestError> {
        match self.problems.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(self.transactions),
        }
    }
}

/// Strict parse: any malformed or duplicate record aborts with its line number.
pub fn parse_transactions<R: BufRead>(reader: R) -> Result<Vec<RawTransaction>, IngestError> {
    TxScan::from_reader(reader)?.into_result()
}

pub fn write_transactions<W: Write>(mut writer: W, txs: &[RawTransaction]) -> io::Result<()> {
    for tx in txs {
        serde_json::to_writer(&mut writer, tx)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_by_two_preserving_order() {
        let line = r#"{"tx_id":"t","timestamp":10,"inputs":[{"address":"a","value":3},{"address":"b","value":4}],"outputs":[{"address":"d","value":1},{"address":"c","value":5}]}"#;
        let tx = parse_transaction_line(line, 1).unwrap();
        assert_eq!(tx.inputs, vec![TxIo::new("a", 3), TxIo::new("b", 4)]);
        assert_eq!(tx.outputs, vec![TxIo::new("d", 1), TxIo::new("c", 5)]);
        assert!(!tx.is_coinbase());
    }

    #[test]
    fn coinbase_accepted() {
        let line = r#"{"tx_id":"cb","timestamp":0,"inputs":[],"outputs":[{"address":"m","value":5000000000}]}"#;
        assert!(parse_transaction_line(line, 1).unwrap().is_coinbase());
    }

    #[test]
    fn missing_timestamp_is_malformed() {
        let line = r#"{"tx_id":"t","inputs":[],"outputs":[{"address":"m","value":1}]}"#;
        match parse_transaction_line(line, 7) {
            Err(IngestError::MalformedRecord { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violations() {
        for bad in [
            r#"{"tx_id":"","timestamp":1,"inputs":[],"outputs":[{"address":"m","value":1}]}"#,
            r#"{"tx_id":"t","timestamp":1,"inputs":[],"outputs":[]}"#,
            r#"{"tx_id":"t","timestamp":1,"inputs":[],"outputs":[{"address":"m","value":-1}]}"#,
            r#"{"tx_id":"t","timestamp":1,"inputs":[],"outputs":[{"address":"m","value":1}],"fee":2}"#,
            "not json",
        ] {
            assert!(
                matches!(
                    parse_transaction_line(bad, 1),
                    Err(IngestError::MalformedRecord { .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn duplicates_and_malformed_are_reported_not_dropped() {
        let text = [
            r#"{"tx_id":"a","timestamp":1,"inputs":[],"outputs":[{"address":"m","value":1}]}"#,
            "garbage",
            "",
            r#"{"tx_id":"a","timestamp":2,"inputs":[],"outputs":[{"address":"m","value":1}]}"#,
        ]
        .join("\n");
        let scan = TxScan::from_str_chunk(&text, 1);
        assert_eq!(scan.transactions.len(), 1);
        assert_eq!(scan.malformed_count(), 2);
        assert!(matches!(
            scan.problems[0],
            IngestError::MalformedRecord { line: 2, .. }
        ));
        assert!(matches!(
            scan.problems[1],
            IngestError::DuplicateTxId { line: 4, .. }
        ));
        assert!(matches!(
            parse_transactions(text.as_bytes()),
            Err(IngestError::MalformedRecord { line: 2, .. })
        ));
    }
}
