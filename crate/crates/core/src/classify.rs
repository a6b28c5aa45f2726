//! Monthly entity roles and inter-category flows.
//!
//! Within one UTC month, an entity is a Frequent Receiver when it receives
//! genuine payments on at least `required_active_days` distinct days and has
//! at least `required_other_tx` other payments, counting every payment sent
//! plus received payments beyond the first of each receiving day. Non-FR
//! entities that pay or are paid by an FR of the same month are First
//! Neighbors; everything else active that month is Other.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use thiserror::Error;

use crate::cluster::EntityId;
use crate::ingest::{utc_date, Month};
use crate::payments::Payment;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("{month}: payment references unlabeled entity {entity}")]
    UnlabeledEntity { month: Month, entity: EntityId },
    #[error("labels line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    /// Frequent Receiver.
    Fr,
    /// First Neighbor of an FR.
    N1,
    /// The Others.
    To,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Fr, Category::N1, Category::To];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Fr => "FR",
            Category::N1 => "N1",
            Category::To => "TO",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrParams {
    pub required_active_days: u32,
    pub required_other_tx: u32,
}

impl Default for FrParams {
    fn default() -> Self {
        Self {
            required_active_days: 20,
            required_other_tx: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonthlyLabel {
    pub month: Month,
    pub entity: EntityId,
    pub category: Category,
}

/// Labels of every entity active in one month.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonthLabels {
    pub month: Month,
    pub labels: BTreeMap<EntityId, Category>,
}

impl MonthLabels {
    pub fn get(&self, entity: EntityId) -> Option<Category> {
        self.labels.get(&entity).copied()
    }

    pub fn with_category(&self, cat: Category) -> impl Iterator<Item = EntityId> + '_ {
        self.labels
            .iter()
            .filter(move |(_, c)| **c == cat)
            .map(|(e, _)| *e)
    }

    pub fn iter(&self) -> impl Iterator<Item = MonthlyLabel> + '_ {
        self.labels.iter().map(|(e, c)| MonthlyLabel {
            month: self.month,
            entity: *e,
            category: *c,
        })
    }
}

#[derive(Default)]
struct Activity {
    sent: u32,
    received: u32,
    receiving_days: HashSet<NaiveDate>,
}

impl Activity {
    fn other_participation(&self) -> u32 {
        self.sent + self.received - self.receiving_days.len() as u32
    }
}

fn is_frequent_receiver(a: &Activity, params: &FrParams) -> bool {
    a.receiving_days.len() as u32 >= params.required_active_days
        && a.other_participation() >= params.required_other_tx
}

/// Labels the entities active in `month`. Payments outside the month are
/// ignored.
pub fn classify_month(month: Month, payments: &[Payment], params: &FrParams) -> MonthLabels {
    let in_month: Vec<&Payment> = payments.iter().filter(|p| p.month() == month).collect();
    let mut activity: HashMap<EntityId, Activity> = HashMap::new();
    for p in &in_month {
        activity.entry(p.src).or_default().sent += 1;
        let dst = activity.entry(p.dst).or_default();
        dst.received += 1;
        dst.receiving_days.insert(utc_date(p.timestamp));
    }

    let fr: HashSet<EntityId> = activity
        .iter()
        .filter(|(_, a)| is_frequent_receiver(a, params))
        .map(|(e, _)| *e)
        .collect();

    let mut labels: BTreeMap<EntityId, Category> =
        activity.keys().map(|e| (*e, Category::To)).collect();
    for p in &in_month {
        let (src_fr, dst_fr) = (fr.contains(&p.src), fr.contains(&p.dst));
        if src_fr && !dst_fr {
            labels.insert(p.dst, Category::N1);
        }
        if dst_fr && !src_fr {
            labels.insert(p.src, Category::N1);
        }
    }
    for e in &fr {
        labels.insert(*e, Category::Fr);
    }
    MonthLabels { month, labels }
}

pub fn group_by_month(payments: &[Payment]) -> BTreeMap<Month, Vec<Payment>> {
    let mut out: BTreeMap<Month, Vec<Payment>> = BTreeMap::new();
    for p in payments {
        out.entry(p.month()).or_default().push(p.clone());
    }
    out
}

/// Classifies every month independently.
pub fn classify_all(payments: &[Payment], params: &FrParams) -> Vec<MonthLabels> {
    let grouped: Vec<(Month, Vec<Payment>)> = group_by_month(payments).into_iter().collect();
    grouped
        .par_iter()
        .map(|(m, ps)| classify_month(*m, ps, params))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairFlow {
    pub count: u64,
    pub usd: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CategoryStats {
    pub entity_count: u64,
    pub payments_sent: u64,
    pub payments_received: u64,
    pub usd_sent: f64,
    pub usd_received: f64,
}

/// Payment counts and USD between categories in one month.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatrix {
    pub month: Month,
    /// Indexed `[src category][dst category]`.
    pub pairs: [[PairFlow; 3]; 3],
    pub categories: [CategoryStats; 3],
}

impl FlowMatrix {
    pub fn pair(&self, src: Category, dst: Category) -> PairFlow {
        self.pairs[src.index()][dst.index()]
    }

    pub fn total_count(&self) -> u64 {
        self.pairs.iter().flatten().map(|p| p.count).sum()
    }

    /// Checks the count identity against `n_payments` exactly and the USD
    /// sent/received balance to a relative 1e-9.
    pub fn check_identities(&self, n_payments: u64) -> Result<(), String> {
        if self.total_count() != n_payments {
            return Err(format!(
                "{}: pair counts sum to {} but month has {} payments",
                self.month,
                self.total_count(),
                n_payments
            ));
        }
        let sent: f64 = self.categories.iter().map(|c| c.usd_sent).sum();
        let received: f64 = self.categories.iter().map(|c| c.usd_received).sum();
        if (sent - received).abs() > 1e-9 * sent.abs().max(1.0) {
            return Err(format!(
                "{}: usd sent {sent} != received {received}",
                self.month
            ));
        }
        Ok(())
    }
}

pub fn aggregate_flows(
    month: Month,
    payments: &[Payment],
    labels: &MonthLabels,
) -> Result<FlowMatrix, ClassifyError> {
    let mut m = FlowMatrix {
        month,
        pairs: Default::default(),
        categories: Default::default(),
    };
    let mut seen: [BTreeSet<EntityId>; 3] = Default::default();
    let label = |entity| {
        labels
            .get(entity)
            .ok_or(ClassifyError::UnlabeledEntity { month, entity })
    };
    for p in payments.iter().filter(|p| p.month() == month) {
        let (sc, dc) = (label(p.src)?, label(p.dst)?);
        let pair = &mut m.pairs[sc.index()][dc.index()];
        pair.count += 1;
        pair.usd += p.value_usd;
        let s = &mut m.categories[sc.index()];
        s.payments_sent += 1;
        s.usd_sent += p.value_usd;
        let d = &mut m.categories[dc.index()];
        d.payments_received += 1;
        d.usd_received += p.value_usd;
        seen[sc.index()].insert(p.src);
        seen[dc.index()].insert(p.dst);
    }
    for (stats, set) in m.categories.iter_mut().zip(&seen) {
        stats.entity_count = set.len() as u64;
    }
    Ok(m)
}

pub fn write_labels_csv<W: Write>(mut w: W, months: &[MonthLabels]) -> std::io::Result<()> {
    writeln!(w, "year,month,entity_id,category")?;
    for ml in months {
        for l in ml.iter() {
            writeln!(
                w,
                "{},{},{},{}",
                l.month.year, l.month.month, l.entity, l.category
            )?;
        }
    }
    Ok(())
}

pub fn read_labels_csv<R: Read>(r: R) -> Result<Vec<MonthLabels>, ClassifyError> {
    let mut rdr = csv::Reader::from_reader(r);
    let malformed = |line: usize, reason: String| ClassifyError::Malformed { line, reason };
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["year", "month", "entity_id", "category"] {
        return Err(malformed(1, format!("unexpected header {headers:?}")));
    }
    let mut out: BTreeMap<Month, BTreeMap<EntityId, Category>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let month = rec[0]
            .parse()
            .ok()
            .zip(rec[1].parse().ok())
            .and_then(|(y, m)| Month::new(y, m))
            .ok_or_else(|| malformed(line, "bad year/month".into()))?;
        let entity = EntityId(
            rec[2]
                .parse()
                .map_err(|_| malformed(line, "bad entity_id".into()))?,
        );
        let cat: Category = rec[3].parse().map_err(|e| malformed(line, e))?;
        if out.entry(month).or_default().insert(entity, cat).is_some() {
            return Err(malformed(
                line,
                format!("entity {entity} labeled twice in {month}"),
            ));
        }
    }
    Ok(out
        .into_iter()
        .map(|(month, labels)| MonthLabels { month, labels })
        .collect())
}

pub fn write_flows_csv<W: Write>(mut w: W, flows: &[FlowMatrix]) -> std::io::Result<()> {
    writeln!(w, "year,month,src_cat,dst_cat,count,usd")?;
    for f in flows {
        for s in Category::ALL {
            for d in Category::ALL {
                let p = f.pair(s, d);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    f.month.year, f.month.month, s, d, p.count, p.usd
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_category_stats_csv<W: Write>(mut w: W, flows: &[FlowMatrix]) -> std::io::Result<()> {
    writeln!(
        w,
        "year,month,category,entity_count,payments_sent,payments_received,usd_sent,usd_received"
    )?;
    for f in flows {
        for c in Category::ALL {
            let s = f.categories[c.index()];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                f.month.year,
                f.month.month,
                c,
                s.entity_count,
                s.payments_sent,
                s.payments_received,
                s.usd_sent,
                s.usd_received
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: i64 = 86_400;
    // 2018-03-01 00:00 UTC
    const MAR1: i64 = 1_519_862_400;

    fn pay(day: i64, src: u32, dst: u32, usd: f64) -> Payment {
        Payment {
            timestamp: MAR1 + day * DAY + 3600,
            src: EntityId(src),
            dst: EntityId(dst),
            value_sats: 1,
            value_usd: usd,
        }
    }

    fn march() -> Month {
        Month::new(2018, 3).unwrap()
    }

    /// Entity 0 receives one payment a day for `days` days from 1 and pays
    /// entity 2 ten times.
    fn business(days: i64) -> Vec<Payment> {
        let mut v: Vec<Payment> = (0..days).map(|d| pay(d, 1, 0, 5.0)).collect();
        v.extend((0..10).map(|d| pay(d, 0, 2, 5.0)));
        v
    }

    #[test]
    fn twenty_days_and_ten_sent_is_fr() {
        let l = classify_month(march(), &business(20), &FrParams::default());
        assert_eq!(l.get(EntityId(0)), Some(Category::Fr));
        assert_eq!(l.get(EntityId(1)), Some(Category::N1));
        assert_eq!(l.get(EntityId(2)), Some(Category::N1));
    }

    #[test]
    fn nineteen_days_paying_an_fr_is_n1() {
        let mut ps = business(20);
        // Entity 5: 19 receiving days, and pays the FR.
        ps.extend((0..19).map(|d| pay(d, 6, 5, 1.0)));
        ps.extend((0..12).map(|d| pay(d, 5, 0, 1.0)));
        let l = classify_month(march(), &ps, &FrParams::default());
        assert_eq!(l.get(EntityId(5)), Some(Category::N1));
        assert_eq!(l.get(EntityId(0)), Some(Category::Fr));
    }

    #[test]
    fn isolated_pair_is_to() {
        let mut ps = business(20);
        ps.push(pay(3, 7, 8, 1.0));
        let l = classify_month(march(), &ps, &FrParams::default());
        assert_eq!(l.get(EntityId(7)), Some(Category::To));
        assert_eq!(l.get(EntityId(8)), Some(Category::To));
    }

    #[test]
    fn other_participation_excludes_one_payment_per_day() {
        // 20 days with 1 receipt each and only 9 sent: other = 9.
        let mut ps: Vec<Payment> = (0..20).map(|d| pay(d, 1, 0, 5.0)).collect();
        ps.extend((0..9).map(|d| pay(d, 0, 2, 5.0)));
        let l = classify_month(march(), &ps, &FrParams::default());
        assert_ne!(l.get(EntityId(0)), Some(Category::Fr));
        // A second receipt on day 0 makes other = 10.
        ps.push(pay(0, 3, 0, 5.0));
        let l = classify_month(march(), &ps, &FrParams::default());
        assert_eq!(l.get(EntityId(0)), Some(Category::Fr));
    }

    #[test]
    fn fr_to_fr_payment_does_not_make_n1() {
        let mut ps = business(20);
        let mut other: Vec<Payment> = business(20)
            .into_iter()
            .map(|mut p| {
                p.src = EntityId(p.src.0 + 10);
                p.dst = EntityId(p.dst.0 + 10);
                p
            })
            .collect();
        ps.append(&mut other);
        ps.push(pay(4, 0, 10, 2.0));
        let l = classify_month(march(), &ps, &FrParams::default());
        assert_eq!(l.get(EntityId(0)), Some(Category::Fr));
        assert_eq!(l.get(EntityId(10)), Some(Category::Fr));
        let f = aggregate_flows(march(), &ps, &l).unwrap();
        assert_eq!(f.pair(Category::Fr, Category::Fr).count, 1);
    }

    #[test]
    fn n1_to_fr_flow_sums() {
        let ps = business(20);
        let l = classify_month(march(), &ps, &FrParams::default());
        let f = aggregate_flows(march(), &ps, &l).unwrap();
        let p = f.pair(Category::N1, Category::Fr);
        assert_eq!(p.count, 20);
        assert_eq!(p.usd, 100.0);
        f.check_identities(ps.len() as u64).unwrap();

        let three = vec![pay(0, 1, 0, 10.0), pay(1, 1, 0, 10.0), pay(2, 1, 0, 10.0)];
        let labels = MonthLabels {
            month: march(),
            labels: BTreeMap::from([(EntityId(0), Category::Fr), (EntityId(1), Category::N1)]),
        };
        let f = aggregate_flows(march(), &three, &labels).unwrap();
        assert_eq!(
            f.pair(Category::N1, Category::Fr),
            PairFlow {
                count: 3,
                usd: 30.0
            }
        );
        assert_eq!(f.categories[Category::Fr.index()].entity_count, 1);
    }

    #[test]
    fn empty_month_is_all_zero() {
        let labels = MonthLabels {
            month: march(),
            labels: BTreeMap::new(),
        };
        let f = aggregate_flows(march(), &[], &labels).unwrap();
        assert_eq!(f.total_count(), 0);
        assert!(f.categories.iter().all(|c| *c == CategoryStats::default()));
    }

    #[test]
    fn unlabeled_entity() {
        let labels = MonthLabels {
            month: march(),
            labels: BTreeMap::new(),
        };
        assert!(matches!(
            aggregate_flows(march(), &[pay(0, 1, 2, 1.0)], &labels),
            Err(ClassifyError::UnlabeledEntity { .. })
        ));
    }

    #[test]
    fn february_still_needs_twenty_days() {
        let feb1 = 1_517_443_200; // 2018-02-01
        let ps: Vec<Payment> = (0..28)
            .map(|d| Payment {
                timestamp: feb1 + d * DAY,
                src: EntityId(1),
                dst: EntityId(0),
                value_sats: 1,
                value_usd: 1.0,
            })
            .chain((0..10).map(|d| Payment {
                timestamp: feb1 + d * DAY,
                src: EntityId(0),
                dst: EntityId(2),
                value_sats: 1,
                value_usd: 1.0,
            }))
            .collect();
        let feb = Month::new(2018, 2).unwrap();
        assert_eq!(
            classify_month(feb, &ps, &FrParams::default()).get(EntityId(0)),
            Some(Category::Fr)
        );
        let short: Vec<Payment> = ps
            .iter()
            .filter(|p| p.src == EntityId(0) || p.timestamp < feb1 + 19 * DAY)
            .cloned()
            .collect();
        assert_ne!(
            classify_month(feb, &short, &FrParams::default()).get(EntityId(0)),
            Some(Category::Fr)
        );
    }

    #[test]
    fn labels_csv_round_trip() {
        let ps = business(20);
        let l = classify_all(&ps, &FrParams::default());
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &l).unwrap();
        assert_eq!(read_labels_csv(buf.as_slice()).unwrap(), l);
    }
}
