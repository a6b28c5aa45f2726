//! Deterministic synthetic transaction streams with planted ground truth.
//!
//! Businesses receive customer payments every local day at hours drawn from
//! a daily profile in their own time zone, damped on weekends, and pay
//! monthly expenses. Customers co-spend their own addresses and always send
//! change to a fresh address; a final sweep per entity co-spends every
//! address it owns so the common-input clusters equal the planted entities.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! so a seed and config reproduce the stream byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use thiserror::Error;

use crate::classify::{Category, MonthLabels};
use crate::cluster::{EntityId, EntityMap};
use crate::ingest::{FillPolicy, Month, PriceTable, RawTransaction, TxIo, SATS_PER_BTC};
use crate::temporal::circular_distance;

pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";

/// Two-peak human day: late-morning and evening highs, night trough.
pub const DEFAULT_DAILY_PROFILE: [f64; 24] = [
    0.15, 0.10, 0.08, 0.07, 0.07, 0.10, 0.20, 0.40, 0.65, 0.85, 1.00, 1.00, 0.90, 0.85, 0.85, 0.80,
    0.80, 0.85, 0.90, 0.95, 0.95, 0.85, 0.60, 0.30,
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("ground truth line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriceCurve {
    Constant(f64),
    /// Compounding daily change; with `gap_every = k > 0`, every k-th day
    /// has no price.
    Drift {
        start_usd: f64,
        daily_change: f64,
        gap_every: u32,
    },
}

impl PriceCurve {
    fn price(&self, day_index: u64) -> Option<f64> {
        match *self {
            PriceCurve::Constant(p) => Some(p),
            PriceCurve::Drift {
                start_usd,
                daily_change,
                gap_every,
            } => {
                if gap_every > 0 && day_index % u64::from(gap_every) == u64::from(gap_every) - 1 {
                    None
                } else {
                    Some(start_usd * (1.0 + daily_change).powi(day_index as i32))
                }
            }
        }
    }
}

impl fmt::Display for PriceCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriceCurve::Constant(p) => write!(f, "constant:{p}"),
            PriceCurve::Drift {
                start_usd,
                daily_change,
                gap_every,
            } => write!(f, "drift:{start_usd}:{daily_change}:{gap_every}"),
        }
    }
}

impl std::str::FromStr for PriceCurve {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64, String> {
            parts
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("bad price curve {s:?}"))
        };
        match parts.first() {
            Some(&"constant") if parts.len() == 2 => Ok(PriceCurve::Constant(num(1)?)),
            Some(&"drift") if parts.len() == 4 => Ok(PriceCurve::Drift {
                start_usd: num(1)?,
                daily_change: num(2)?,
                gap_every: num(3)? as u32,
            }),
            _ => Err(format!(
                "expected constant:<usd> or drift:<usd>:<daily_change>:<gap_every>, got {s:?}"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// First UTC day; the stream covers `months` whole months from here.
    pub start: NaiveDate,
    pub months: u32,
    pub n_businesses: usize,
    pub n_customers: usize,
    /// Assigned round-robin; each in `[-12, 11]`.
    pub business_tz: Vec<i32>,
    /// Local-time hourly weights.
    pub daily_profile: [f64; 24],
    /// Saturday/Sunday payment rate multiplier.
    pub weekend_damping: f64,
    pub payments_per_business_day: u32,
    pub expenses_per_month: u32,
    pub p2p_per_customer_month: f64,
    pub dust_rate: f64,
    pub macro_rate: f64,
    pub addresses_per_entity: usize,
    pub price: PriceCurve,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            start: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            months: 3,
            n_businesses: 24,
            n_customers: 600,
            business_tz: vec![-8, -5, -3, 0, 1, 3, 5, 8, 9],
            daily_profile: DEFAULT_DAILY_PROFILE,
            weekend_damping: 0.5,
            payments_per_business_day: 12,
            expenses_per_month: 12,
            p2p_per_customer_month: 1.0,
            dust_rate: 0.05,
            macro_rate: 0.01,
            addresses_per_entity: 3,
            price: PriceCurve::Constant(10_000.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.months == 0 {
            return bad("months must be positive".into());
        }
        if self.n_customers < 2 {
            return bad("need at least 2 customers".into());
        }
        if self.n_businesses > 0 && self.business_tz.is_empty() {
            return bad("business_tz is empty".into());
        }
        if let Some(tz) = self.business_tz.iter().find(|tz| !(-12..=11).contains(*tz)) {
            return bad(format!("time zone {tz} outside [-12, 11]"));
        }
        if self
            .daily_profile
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.daily_profile.iter().sum::<f64>() <= 0.0
        {
            return bad("daily profile must be non-negative and not all zero".into());
        }
        for (name, v) in [
            ("weekend_damping", self.weekend_damping),
            ("dust_rate", self.dust_rate),
            ("macro_rate", self.macro_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.payments_per_business_day == 0 {
            return bad("payments_per_business_day must be positive".into());
        }
        if self.addresses_per_entity == 0 {
            return bad("addresses_per_entity must be positive".into());
        }
        if self.p2p_per_customer_month.is_nan() || self.p2p_per_customer_month < 0.0 {
            return bad("p2p_per_customer_month must be non-negative".into());
        }
        let probe = match self.price {
            PriceCurve::Constant(p) => p,
            PriceCurve::Drift {
                start_usd,
                daily_change,
                ..
            } => {
                if daily_change <= -1.0 {
                    return bad("daily_change must exceed -1".into());
                }
                start_usd
            }
        };
        if !(probe > 0.0 && probe.is_finite()) {
            return bad("prices must be positive".into());
        }
        Ok(())
    }

    fn end(&self) -> NaiveDate {
        let mut m = Month::of_date(self.start);
        for _ in 0..self.months {
            m = m.succ();
        }
        // Whole months counted from the start day's month.
        let first = m.first_day();
        if self.start.day() == 1 {
            first
        } else {
            self.start + (first - Month::of_date(self.start).first_day())
        }
    }

    /// Resolved `key=value` lines for the run manifest.
    pub fn manifest(&self) -> String {
        let tz: Vec<String> = self.business_tz.iter().map(i32::to_string).collect();
        let profile: Vec<String> = self.daily_profile.iter().map(f64::to_string).collect();
        format!(
            "rng={RNG_ALGORITHM}\nseed={}\nstart={}\nmonths={}\nn_businesses={}\nn_customers={}\n\
             business_tz={}\ndaily_profile={}\nweekend_damping={}\npayments_per_business_day={}\n\
             expenses_per_month={}\np2p_per_customer_month={}\ndust_rate={}\nmacro_rate={}\n\
             addresses_per_entity={}\nprice={}\n",
            self.seed,
            self.start,
            self.months,
            self.n_businesses,
            self.n_customers,
            tz.join(";"),
            profile.join(";"),
            self.weekend_damping,
            self.payments_per_business_day,
            self.expenses_per_month,
            self.p2p_per_customer_month,
            self.dust_rate,
            self.macro_rate,
            self.addresses_per_entity,
            self.price,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Business,
    Customer,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Business => "business",
            EntityKind::Customer => "customer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedEntity {
    pub id: usize,
    pub kind: EntityKind,
    pub tz: i32,
    pub addresses: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub entities: Vec<PlantedEntity>,
}

impl GroundTruth {
    pub fn address_owner(&self) -> HashMap<&str, usize> {
        self.entities
            .iter()
            .flat_map(|e| e.addresses.iter().map(move |a| (a.as_str(), e.id)))
            .collect()
    }

    pub fn businesses(&self) -> impl Iterator<Item = &PlantedEntity> {
        self.entities
            .iter()
            .filter(|e| e.kind == EntityKind::Business)
    }

    /// `planted_id,entity_kind,tz_offset,address`, one row per address.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "planted_id,entity_kind,tz_offset,address")?;
        for e in &self.entities {
            for a in &e.addresses {
                writeln!(w, "{},{},{},{}", e.id, e.kind.as_str(), e.tz, a)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SynthError> {
        let mut rdr = csv::Reader::from_reader(r);
        let malformed = |line: usize, reason: String| SynthError::Malformed { line, reason };
        let headers = rdr
            .headers()
            .map_err(|e| malformed(1, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>()
            != ["planted_id", "entity_kind", "tz_offset", "address"]
        {
            return Err(malformed(1, format!("unexpected header {headers:?}")));
        }
        let mut by_id: BTreeMap<usize, PlantedEntity> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let id: usize = rec[0]
                .parse()
                .map_err(|_| malformed(line, "bad planted_id".into()))?;
            let kind = match &rec[1] {
                "business" => EntityKind::Business,
                "customer" => EntityKind::Customer,
                k => return Err(malformed(line, format!("bad entity_kind {k:?}"))),
            };
            let tz: i32 = rec[2]
                .parse()
                .map_err(|_| malformed(line, "bad tz_offset".into()))?;
            let e = by_id.entry(id).or_insert_with(|| PlantedEntity {
                id,
                kind,
                tz,
                addresses: Vec::new(),
            });
            if e.kind != kind || e.tz != tz {
                return Err(malformed(
                    line,
                    format!("inconsistent rows for entity {id}"),
                ));
            }
            e.addresses.push(rec[3].to_owned());
        }
        Ok(GroundTruth {
            entities: by_id.into_values().collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub transactions: Vec<RawTransaction>,
    pub prices: PriceTable,
    pub ground_truth: GroundTruth,
}

/// Who pays whom, before wallet state turns it into a transaction.
#[derive(Clone, Copy, Debug)]
enum Event {
    Funding {
        entity: usize,
    },
    Payment {
        payer: usize,
        payee: usize,
        usd: f64,
    },
    Sweep {
        entity: usize,
    },
}

struct Wallet {
    addresses: Vec<String>,
    base: usize,
    last_change: Option<String>,
    next_change: usize,
    cursor: usize,
}

struct Generator {
    rng: ChaCha8Rng,
    hour_dist: WeightedIndex<f64>,
    start_ts: i64,
    end_ts: i64,
}

fn midnight(d: NaiveDate) -> i64 {
    d.and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
}

fn is_weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

impl Generator {
    fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (self.rng.random_range(lo.ln()..hi.ln())).exp()
    }

    /// UTC timestamp of a random profile-weighted moment on `local_day` in
    /// zone `tz`.
    fn local_moment(&mut self, local_day: NaiveDate, tz: i32) -> i64 {
        let hour = self.hour_dist.sample(&mut self.rng) as i64;
        let secs = self.rng.random_range(0..3600);
        midnight(local_day) + hour * 3600 + secs - i64::from(tz) * 3600
    }

    fn in_window(&self, ts: i64) -> bool {
        (self.start_ts..self.end_ts).contains(&ts)
    }

    fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            0
        } else {
            Poisson::new(lambda)
                .expect("positive rate")
                .sample(&mut self.rng) as u64
        }
    }
}

/// Generates the stream, its price table and ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let end = cfg.end();
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        hour_dist: WeightedIndex::new(cfg.daily_profile)
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?,
        start_ts: midnight(cfg.start),
        end_ts: midnight(end),
    };
    let nb = cfg.n_businesses;
    let nc = cfg.n_customers;

    let mut entities: Vec<PlantedEntity> = Vec::with_capacity(nb + nc);
    for b in 0..nb {
        entities.push(PlantedEntity {
            id: b,
            kind: EntityKind::Business,
            tz: cfg.business_tz[b % cfg.business_tz.len()],
            addresses: (0..cfg.addresses_per_entity)
                .map(|k| format!("b{b:05}x{k}"))
                .collect(),
        });
    }
    let customer_zones = if cfg.business_tz.is_empty() {
        vec![0]
    } else {
        cfg.business_tz.clone()
    };
    for c in 0..nc {
        let tz = customer_zones[g.rng.random_range(0..customer_zones.len())];
        entities.push(PlantedEntity {
            id: nb + c,
            kind: EntityKind::Customer,
            tz,
            addresses: (0..cfg.addresses_per_entity)
                .map(|k| format!("c{c:05}x{k}"))
                .collect(),
        });
    }

    // (timestamp, phase, sequence, event); phase orders funding first and
    // sweeps last among equal timestamps.
    let mut events: Vec<(i64, u8, usize, Event)> = Vec::new();
    let push = |events: &mut Vec<(i64, u8, usize, Event)>, ts: i64, phase: u8, e: Event| {
        let seq = events.len();
        events.push((ts, phase, seq, e));
    };
    for e in 0..nb + nc {
        push(&mut events, g.start_ts, 0, Event::Funding { entity: e });
    }

    let random_customer = |g: &mut Generator, except: Option<usize>| loop {
        let c = nb + g.rng.random_range(0..nc);
        if Some(c) != except {
            break c;
        }
    };

    let zone_of: Vec<i32> = entities.iter().map(|e| e.tz).collect();

    // Customer payments into businesses: at least one per local day.
    for (b, &tz) in zone_of[..nb].iter().enumerate() {
        let mut day = cfg.start - Days::new(1);
        while day <= end {
            let rate = f64::from(cfg.payments_per_business_day)
                * if is_weekend(day) {
                    cfg.weekend_damping
                } else {
                    1.0
                };
            let n = g.poisson(rate).max(1);
            for _ in 0..n {
                let ts = g.local_moment(day, tz);
                let payer = random_customer(&mut g, None);
                let usd = g.log_uniform(2.0, 300.0);
                if g.in_window(ts) {
                    push(
                        &mut events,
                        ts,
                        1,
                        Event::Payment {
                            payer,
                            payee: b,
                            usd,
                        },
                    );
                }
            }
            day = day + Days::new(1);
        }
    }

    // Business expenses and customer-to-customer payments, per UTC month.
    let mut month = Month::of_date(cfg.start);
    let month_end = Month::of_date(end - Days::new(1));
    while month <= month_end {
        let first = month.first_day().max(cfg.start);
        let last = (month.succ().first_day() - Days::new(1)).min(end - Days::new(1));
        let span = (last - first).num_days() as u64 + 1;
        for (b, &tz) in zone_of[..nb].iter().enumerate() {
            for k in 0..cfg.expenses_per_month {
                let day = first
                    + Days::new(u64::from(k) * span / u64::from(cfg.expenses_per_month.max(1)));
                let ts = g.local_moment(day, tz);
                let payee = random_customer(&mut g, None);
                let usd = g.log_uniform(20.0, 800.0);
                if g.in_window(ts) {
                    push(
                        &mut events,
                        ts,
                        1,
                        Event::Payment {
                            payer: b,
                            payee,
                            usd,
                        },
                    );
                }
            }
        }
        for (c, &tz) in zone_of.iter().enumerate().skip(nb) {
            let n = g.poisson(cfg.p2p_per_customer_month);
            for _ in 0..n {
                let day = first + Days::new(g.rng.random_range(0..span));
                let ts = g.local_moment(day, tz);
                let payee = random_customer(&mut g, Some(c));
                let usd = g.log_uniform(1.0, 500.0);
                if g.in_window(ts) {
                    push(
                        &mut events,
                        ts,
                        1,
                        Event::Payment {
                            payer: c,
                            payee,
                            usd,
                        },
                    );
                }
            }
        }
        month = month.succ();
    }

    for e in 0..nb + nc {
        push(&mut events, g.end_ts - 1, 2, Event::Sweep { entity: e });
    }
    events.sort_by_key(|(ts, phase, seq, _)| (*ts, *phase, *seq));

    let mut prices = PriceTable::new();
    let mut day = cfg.start;
    let mut index = 0u64;
    while day < end {
        if let Some(p) = cfg.price.price(index) {
            prices
                .insert(day, p)
                .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        }
        day = day + Days::new(1);
        index += 1;
    }

    let mut wallets: Vec<Wallet> = entities
        .iter()
        .map(|e| Wallet {
            addresses: e.addresses.clone(),
            base: e.addresses.len(),
            last_change: None,
            next_change: 0,
            cursor: 0,
        })
        .collect();

    let mut txs = Vec::with_capacity(events.len());
    for (n, (ts, _, _, event)) in events.into_iter().enumerate() {
        let date = crate::ingest::utc_date(ts);
        // Sats use the nearest earlier price so gaps in a drifting curve
        // still yield sensible amounts.
        let price = prices
            .price_on(date, FillPolicy::Forward { max_days: 30 })
            .unwrap_or(10_000.0);
        let sats = |usd: f64| ((usd / price * SATS_PER_BTC).round() as u64).max(1);
        let (payer, mut inputs, mut outputs) = match event {
            Event::Funding { entity } => {
                let w = &wallets[entity];
                let outs = w.addresses[..w.base]
                    .iter()
                    .map(|a| TxIo::new(a.clone(), sats(1_000.0)))
                    .collect();
                (entity, Vec::new(), outs)
            }
            Event::Sweep { entity } => {
                let w = &wallets[entity];
                let mut spend: Vec<String> = w.addresses[..w.base].to_vec();
                spend.extend(w.last_change.clone());
                let ins = spend.iter().map(|a| TxIo::new(a.clone(), 0)).collect();
                (
                    entity,
                    ins,
                    vec![TxIo::new(w.addresses[0].clone(), sats(50.0))],
                )
            }
            Event::Payment { payer, payee, usd } => {
                let to = {
                    let pw = &wallets[payee];
                    pw.addresses[g.rng.random_range(0..pw.base)].clone()
                };
                let w = &mut wallets[payer];
                let mut spend = Vec::with_capacity(2);
                let k = w.cursor % w.base;
                w.cursor += 1;
                match &w.last_change {
                    Some(c) => spend.push(c.clone()),
                    None => spend.push(w.addresses[k].clone()),
                }
                let second = w.addresses[(k + 1) % w.base].clone();
                if !spend.contains(&second) {
                    spend.push(second);
                }
                let change_value = sats(g.rng.random_range(1.0..60.0));
                let change_addr = if entities[payer].kind == EntityKind::Customer {
                    let a = format!("{}c{}", &w.addresses[0][..6], w.next_change);
                    w.next_change += 1;
                    w.addresses.push(a.clone());
                    w.last_change = Some(a.clone());
                    a
                } else {
                    w.addresses[k].clone()
                };
                let ins = spend.into_iter().map(|a| TxIo::new(a, 0)).collect();
                (
                    payer,
                    ins,
                    vec![
                        TxIo::new(to, sats(usd)),
                        TxIo::new(change_addr, change_value),
                    ],
                )
            }
        };
        let other = |g: &mut Generator| -> String {
            let c = random_customer(g, Some(payer));
            let w = &wallets[c];
            w.addresses[g.rng.random_range(0..w.base)].clone()
        };
        if g.rng.random_bool(cfg.dust_rate) {
            let usd = g.rng.random_range(0.02..0.45);
            let to = other(&mut g);
            outputs.push(TxIo::new(
                to,
                ((usd / price * SATS_PER_BTC).floor() as u64).max(1),
            ));
        }
        if g.rng.random_bool(cfg.macro_rate) {
            let usd = g.log_uniform(12_000.0, 60_000.0);
            let to = other(&mut g);
            outputs.push(TxIo::new(to, sats(usd)));
        }
        if !inputs.is_empty() {
            let total: u64 = outputs.iter().map(|o| o.value).sum::<u64>() + 1_000;
            let share = total / inputs.len() as u64;
            let len = inputs.len() as u64;
            for (i, input) in inputs.iter_mut().enumerate() {
                input.value = if i == 0 {
                    total - share * (len - 1)
                } else {
                    share
                };
            }
        }
        txs.push(RawTransaction {
            tx_id: format!("tx{n:09}"),
            timestamp: ts,
            inputs,
            outputs,
        });
    }

    for (e, w) in entities.iter_mut().zip(wallets) {
        e.addresses = w.addresses;
    }
    Ok(SynthOutput {
        transactions: txs,
        prices,
        ground_truth: GroundTruth { entities },
    })
}

/// FR detection quality and time-zone accuracy against planted truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryMetrics {
    pub fr_true_positive: u64,
    pub fr_false_positive: u64,
    pub fr_false_negative: u64,
    pub fr_precision: f64,
    pub fr_recall: f64,
    pub businesses: u64,
    pub businesses_with_shift: u64,
    pub within_2h: u64,
    pub within_2h_fraction: f64,
}

impl RecoveryMetrics {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "fr_true_positive,{}", self.fr_true_positive)?;
        writeln!(w, "fr_false_positive,{}", self.fr_false_positive)?;
        writeln!(w, "fr_false_negative,{}", self.fr_false_negative)?;
        writeln!(w, "fr_precision,{}", self.fr_precision)?;
        writeln!(w, "fr_recall,{}", self.fr_recall)?;
        writeln!(w, "businesses,{}", self.businesses)?;
        writeln!(w, "businesses_with_shift,{}", self.businesses_with_shift)?;
        writeln!(w, "within_2h,{}", self.within_2h)?;
        writeln!(w, "within_2h_fraction,{}", self.within_2h_fraction)?;
        Ok(())
    }
}

/// Maps each clustered entity to the planted entity owning all its
/// addresses; entities mixing planted owners map to `None`.
pub fn planted_of_entities(
    truth: &GroundTruth,
    map: &EntityMap,
) -> HashMap<EntityId, Option<usize>> {
    let mut out: HashMap<EntityId, Option<usize>> = HashMap::new();
    for e in &truth.entities {
        for a in &e.addresses {
            if let Some(id) = map.get(a) {
                out.entry(id)
                    .and_modify(|p| {
                        if *p != Some(e.id) {
                            *p = None
                        }
                    })
                    .or_insert(Some(e.id));
            }
        }
    }
    out
}

/// Scores FR labels per entity-month against planted businesses, and the
/// share of businesses whose estimated GMT offset is within two hours of the
/// truth. `shifts` holds calibrated estimates in hours.
pub fn score_recovery(
    truth: &GroundTruth,
    map: &EntityMap,
    labels: &[MonthLabels],
    shifts: &BTreeMap<EntityId, f64>,
) -> RecoveryMetrics {
    let planted = planted_of_entities(truth, map);
    let business_entity: BTreeMap<usize, EntityId> = truth
        .businesses()
        .filter_map(|b| map.get(&b.addresses[0]).map(|e| (b.id, e)))
        .collect();
    let is_business = |e: &EntityId| {
        planted
            .get(e)
            .copied()
            .flatten()
            .is_some_and(|p| truth.entities[p].kind == EntityKind::Business)
    };
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for ml in labels {
        for (e, c) in &ml.labels {
            match (*c == Category::Fr, is_business(e)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                _ => {}
            }
        }
        fneg += business_entity
            .values()
            .filter(|e| ml.get(**e) != Some(Category::Fr))
            .count() as u64;
    }
    let precision = match tp + fp {
        0 if fneg == 0 => 1.0,
        0 => 0.0,
        n => tp as f64 / n as f64,
    };
    let recall = match tp + fneg {
        0 => 1.0,
        n => tp as f64 / n as f64,
    };
    let mut with_shift = 0;
    let mut within = 0;
    for b in truth.businesses() {
        if let Some(est) = business_entity.get(&b.id).and_then(|e| shifts.get(e)) {
            with_shift += 1;
            if circular_distance(*est, f64::from(b.tz)) <= 2.0 {
                within += 1;
            }
        }
    }
    RecoveryMetrics {
        fr_true_positive: tp,
        fr_false_positive: fp,
        fr_false_negative: fneg,
        fr_precision: precision,
        fr_recall: recall,
        businesses: business_entity.len() as u64,
        businesses_with_shift: with_shift,
        within_2h: within,
        within_2h_fraction: if with_shift == 0 {
            0.0
        } else {
            within as f64 / with_shift as f64
        },
    }
}
