use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::*;
use realecon::cluster::cluster_addresses;
use realecon::ingest::{
    usd_value, write_transactions, FillPolicy, PriceTable, RawTransaction, TxIo, TxScan,
};
use realecon::payments::{extract_payments, Disposition, Thresholds};
use realecon::temporal::{align, rotate, tz_distribution, AlignParams, NormalizationMode};

type RawTx = (Vec<usize>, Vec<(usize, u64)>);

fn arb_tx(n_addr: usize) -> impl Strategy<Value = RawTx> {
    (
        prop::collection::vec(0..n_addr, 0..4),
        prop::collection::vec((0..n_addr, 1u64..2_000_000_000), 1..4),
    )
}

fn build(raw: &[RawTx]) -> Vec<RawTransaction> {
    raw.iter()
        .enumerate()
        .map(|(i, (ins, outs))| RawTransaction {
            tx_id: format!("t{i}"),
            timestamp: 1_514_808_000 + i as i64 * 97,
            inputs: ins.iter().map(|a| TxIo::new(format!("a{a}"), 1)).collect(),
            outputs: outs
                .iter()
                .map(|(a, v)| TxIo::new(format!("a{a}"), *v))
                .collect(),
        })
        .collect()
}

/// Components by repeated relabeling to the minimum label among co-inputs.
fn closure(txs: &[RawTransaction]) -> BTreeSet<BTreeSet<String>> {
    let mut label: BTreeMap<String, String> = BTreeMap::new();
    for tx in txs {
        for io in tx.inputs.iter().chain(&tx.outputs) {
            label.insert(io.address.clone(), io.address.clone());
        }
    }
    loop {
        let mut changed = false;
        for tx in txs {
            let Some(min) = tx.inputs.iter().map(|i| label[&i.address].clone()).min() else {
                continue;
            };
            for i in &tx.inputs {
                let old = label[&i.address].clone();
                if old != min {
                    changed = true;
                    for v in label.values_mut().filter(|v| **v == old) {
                        *v = min.clone();
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (a, l) in label {
        groups.entry(l).or_default().insert(a);
    }
    groups.into_values().collect()
}

fn partition(txs: &[RawTransaction]) -> BTreeSet<BTreeSet<String>> {
    cluster_addresses(txs)
        .clusters()
        .into_iter()
        .map(|c| c.into_iter().map(str::to_owned).collect())
        .collect()
}

fn jan_prices(p: f64) -> PriceTable {
    let mut t = PriceTable::new();
    t.insert(NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(), p)
        .unwrap();
    t
}

/// Daily profile repeated over the week, damped on two days.
fn human_like(day: &[f64], weekend: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..168)
        .map(|i| day[i % 24] * if i / 24 >= 5 { weekend } else { 1.0 })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip(raw in prop::collection::vec(arb_tx(30), 1..20)) {
        let txs = build(&raw);
        let mut buf = Vec::new();
        write_transactions(&mut buf, &txs).unwrap();
        let back = TxScan::from_reader(buf.as_slice()).unwrap().into_result().unwrap();
        prop_assert_eq!(back, txs);
    }

    #[test]
    fn chunked_scan_matches_single_pass(
        raw in prop::collection::vec(arb_tx(10), 1..20),
        junk in prop::collection::vec(0usize..25, 0..4),
        cut in 0usize..30,
    ) {
        let mut buf = Vec::new();
        write_transactions(&mut buf, &build(&raw)).unwrap();
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(str::to_owned).collect();
        // Malformed records and a repeated id.
        for j in junk {
            let at = j.min(lines.len());
            lines.insert(at, "{\"tx_id\":".into());
        }
        lines.push(lines[0].clone());
        let cut = cut.min(lines.len());
        let whole = TxScan::from_str_chunk(&lines.join("\n"), 1);
        let merged = TxScan::from_str_chunk(&lines[..cut].join("\n"), 1)
            .merge(TxScan::from_str_chunk(&lines[cut..].join("\n"), cut + 1));
        prop_assert_eq!(&merged.transactions, &whole.transactions);
        prop_assert_eq!(&merged.lines, &whole.lines);
        prop_assert_eq!(
            merged.problems.iter().map(|p| p.line()).collect::<Vec<_>>(),
            whole.problems.iter().map(|p| p.line()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn usd_value_is_linear(a in 0u64..10_000_000_000, b in 0u64..10_000_000_000, p in 1.0f64..100_000.0) {
        let d = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        let t = jan_prices(p);
        let f = |s| usd_value(s, d, &t, FillPolicy::Strict).unwrap();
        prop_assert!((f(a + b) - (f(a) + f(b))).abs() <= 1e-9 * f(a + b).max(1.0));
    }

    #[test]
    fn clustering_equals_closure_under_permutation(
        raw in prop::collection::vec(arb_tx(40), 1..40),
        seed in any::<u64>(),
    ) {
        let txs = build(&raw);
        prop_assert_eq!(partition(&txs), closure(&txs));
        let mut shuffled = txs.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        prop_assert_eq!(partition(&shuffled), partition(&txs));
    }

    #[test]
    fn filters_partition_outputs(raw in prop::collection::vec(arb_tx(25), 1..30), price in 1.0f64..50_000.0) {
        let txs = build(&raw);
        let map = cluster_addresses(&txs);
        let th = Thresholds::default();
        let (payments, report) = extract_payments(&txs, &map, &jan_prices(price), &th, FillPolicy::Strict).unwrap();
        let outputs: u64 = txs.iter().filter(|t| !t.is_coinbase()).map(|t| t.outputs.len() as u64).sum();
        let totals = report.totals();
        prop_assert_eq!(totals.total(), outputs);
        prop_assert_eq!(Disposition::ALL.iter().map(|d| totals.get(*d)).sum::<u64>(), outputs);
        prop_assert_eq!(totals.kept, payments.len() as u64);
        for p in &payments {
            prop_assert!(p.src != p.dst);
            prop_assert!(p.value_usd >= th.min_usd && p.value_usd <= th.max_usd);
        }
    }

    #[test]
    fn rotations_compose(w in prop::collection::vec(0.0f64..1.0, 168), a in -400i64..400, b in -400i64..400) {
        prop_assert_eq!(rotate(&rotate(&w, a), b), rotate(&w, a + b));
        prop_assert_eq!(rotate(&w, 168), w.clone());
    }

    #[test]
    fn tz_distribution_normalizes(
        by_year in prop::collection::btree_map(2010i32..2020, prop::collection::vec(-30i32..30, 0..20), 1..5),
    ) {
        let y = tz_distribution(&by_year, NormalizationMode::Yearly);
        for (row, offs) in y.values.iter().zip(by_year.values()) {
            let s: f64 = row.iter().sum();
            let ok = if offs.is_empty() { s == 0.0 } else { (s - 1.0).abs() <= 1e-9 };
            prop_assert!(ok, "row sums to {}", s);
        }
        let g = tz_distribution(&by_year, NormalizationMode::Global);
        let total: f64 = g.values.iter().flatten().sum();
        let any = by_year.values().any(|v| !v.is_empty());
        let ok = if any { (total - 1.0).abs() <= 1e-9 } else { total == 0.0 };
        prop_assert!(ok, "table sums to {}", total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planted_shifts_recovered_on_human_like_patterns(
        day in prop::collection::vec(0.05f64..1.0, 24),
        weekend in 0.2f64..0.9,
        planted in prop::collection::vec(0i64..24, 2..12),
    ) {
        let base = human_like(&day, weekend);
        let rows: Vec<Vec<f64>> = planted.iter().map(|d| rotate(&base, *d)).collect();
        let r = align(&rows, &AlignParams::default()).unwrap();
        prop_assert!(r.total_error < 1e-12);
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let got = (i64::from(r.shifts[i]) - i64::from(r.shifts[j])).rem_euclid(24);
                prop_assert_eq!(got, (planted[i] - planted[j]).rem_euclid(24));
            }
        }
    }
}
