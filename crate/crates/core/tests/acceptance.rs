//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realecon::classify::{aggregate_flows, classify_all, group_by_month, Category, FrParams};
use realecon::cluster::{cluster_addresses, EntityId};
use realecon::ingest::AOE_OFFSET_HOURS;
use realecon::ingest::{usd_value, RawTransaction, TxIo, SATS_PER_BTC};
use realecon::payments::{extract_payments, Disposition, Thresholds};
use realecon::pipeline::{self, PipelineConfig};
use realecon::synth::{self, EntityKind, SynthConfig};
use realecon::temporal::{
    align, build_patterns, calibrate, circular_distance, estimate_shift, filter_noisy,
    fr_entities_by_period, rotate, tz_distribution, AlignParams, NormalizationMode, PeriodKind,
};

#[derive(Default)]
struct Gate {
    failed: usize,
    /// Result lines, printed in criterion order at the end.
    lines: Vec<(u32, String)>,
    /// Every alignment log produced along the way.
    logs: Vec<Vec<(usize, f64)>>,
    patterns_checked: usize,
    pattern_sum_violations: usize,
    distributions: Vec<realecon::temporal::TzDistribution>,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        self.lines
            .push((id, format!("{verdict} {id} {name}: {detail}")));
        if !ok {
            self.failed += 1;
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

/// Random transactions over `n` addresses.
fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<RawTransaction> {
    let n_tx = rng.random_range(1..=n);
    (0..n_tx)
        .map(|t| {
            let k_in = rng.random_range(0..=3);
            let k_out = rng.random_range(1..=3);
            let mut io = |k| -> Vec<TxIo> {
                (0..k)
                    .map(|_| TxIo::new(format!("addr{}", rng.random_range(0..n)), 1))
                    .collect()
            };
            let inputs = io(k_in);
            let outputs = io(k_out);
            RawTransaction {
                tx_id: format!("t{t}"),
                timestamp: 0,
                inputs,
                outputs,
            }
        })
        .collect()
}

/// Connected components of the co-input graph by depth-first search.
fn components_oracle(txs: &[RawTransaction]) -> BTreeSet<BTreeSet<String>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for tx in txs {
        for io in tx.inputs.iter().chain(&tx.outputs) {
            let next = index.len();
            index.entry(io.address.as_str()).or_insert(next);
        }
    }
    let names: Vec<&str> = {
        let mut v = vec![""; index.len()];
        for (a, i) in &index {
            v[*i] = a;
        }
        v
    };
    let mut adj = vec![Vec::new(); index.len()];
    for tx in txs {
        for pair in tx.inputs.windows(2) {
            let (a, b) = (
                index[pair[0].address.as_str()],
                index[pair[1].address.as_str()],
            );
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; names.len()];
    let mut out = BTreeSet::new();
    for start in 0..names.len() {
        if seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.insert(names[v].to_owned());
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn criterion_clustering(g: &mut Gate) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 120;
    let mut matched = 0;
    let mut largest = 0;
    for k in 0..instances {
        let n = if k % 10 == 0 {
            10_000
        } else {
            rng.random_range(2..3_000)
        };
        let txs = random_instance(&mut rng, n);
        let got: BTreeSet<BTreeSet<String>> = cluster_addresses(&txs)
            .clusters()
            .into_iter()
            .map(|c| c.into_iter().map(str::to_owned).collect())
            .collect();
        largest = largest.max(got.iter().map(BTreeSet::len).sum::<usize>());
        if got == components_oracle(&txs) {
            matched += 1;
        }
    }
    let elapsed = t0.elapsed();
    g.report(
        1,
        "clustering oracle equivalence",
        matched == instances && elapsed < Duration::from_secs(10),
        format!(
            "{matched}/{instances} instances match depth-first closure (largest {largest} addresses), {} (limit 10 s)",
            secs(elapsed)
        ),
    );
}

fn criterion_filter_partition(g: &mut Gate) {
    let rates = [0.0, 0.1, 0.5];
    let mut violations = Vec::new();
    let mut outputs_total = 0;
    for dust in rates {
        for macro_rate in rates {
            let cfg = SynthConfig {
                seed: 21,
                months: 1,
                n_businesses: 6,
                n_customers: 80,
                payments_per_business_day: 4,
                dust_rate: dust,
                macro_rate,
                ..SynthConfig::default()
            };
            let out = synth::generate(&cfg).expect("valid config");
            let map = cluster_addresses(&out.transactions);
            let th = Thresholds::default();
            let fill = realecon::ingest::FillPolicy::Strict;
            let (payments, report) =
                extract_payments(&out.transactions, &map, &out.prices, &th, fill)
                    .expect("consistent map");
            let outputs: u64 = out
                .transactions
                .iter()
                .filter(|t| !t.is_coinbase())
                .map(|t| t.outputs.len() as u64)
                .sum();
            outputs_total += outputs;
            let totals = report.totals();
            let summed: u64 = Disposition::ALL.iter().map(|d| totals.get(*d)).sum();
            if summed != outputs || totals.kept != payments.len() as u64 {
                violations.push(format!(
                    "dust {dust} macro {macro_rate}: {summed} != {outputs}"
                ));
            }
            for p in &payments {
                let date = realecon::ingest::utc_date(p.timestamp);
                let usd = usd_value(p.value_sats, date, &out.prices, fill).expect("priced");
                let independent =
                    p.value_sats as f64 / SATS_PER_BTC * out.prices.get(date).expect("priced");
                if p.src == p.dst
                    || !(0.5..=10_000.0).contains(&usd)
                    || !(0.5..=10_000.0).contains(&independent)
                {
                    violations.push(format!("bad kept payment {p:?}"));
                }
            }
        }
    }
    g.report(
        2,
        "filter partition identity",
        violations.is_empty(),
        format!(
            "9 rate combinations, {outputs_total} outputs, {} violations{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    );
}

fn criteria_fr_and_flows(g: &mut Gate) {
    let t0 = Instant::now();
    let cfg = SynthConfig::default();
    let out = synth::generate(&cfg).expect("valid config");
    let map = cluster_addresses(&out.transactions);
    let (payments, _) = extract_payments(
        &out.transactions,
        &map,
        &out.prices,
        &Thresholds::default(),
        realecon::ingest::FillPolicy::Strict,
    )
    .expect("consistent map");
    let labels = classify_all(&payments, &FrParams::default());
    let m = synth::score_recovery(&out.ground_truth, &map, &labels, &BTreeMap::new());
    let elapsed = t0.elapsed();
    g.report(
        3,
        "FR recovery",
        m.fr_precision >= 0.95 && m.fr_recall >= 0.95 && elapsed < Duration::from_secs(60),
        format!(
            "{} businesses, {} customers, {} months: precision {:.3}, recall {:.3} (min 0.95), {} (limit 60 s)",
            cfg.n_businesses,
            cfg.n_customers,
            cfg.months,
            m.fr_precision,
            m.fr_recall,
            secs(elapsed)
        ),
    );

    let by_month = group_by_month(&payments);
    let mut counts = [[0u64; 3]; 3];
    for ml in &labels {
        let f = aggregate_flows(ml.month, &by_month[&ml.month], ml).expect("all labeled");
        for s in Category::ALL {
            for d in Category::ALL {
                counts[s.index()][d.index()] += f.pair(s, d).count;
            }
        }
    }
    let n1_fr = counts[Category::N1.index()][Category::Fr.index()];
    let runner_up = Category::ALL
        .iter()
        .flat_map(|s| Category::ALL.iter().map(move |d| (*s, *d)))
        .filter(|p| *p != (Category::N1, Category::Fr))
        .map(|(s, d)| counts[s.index()][d.index()])
        .max()
        .unwrap_or(0);
    g.report(
        4,
        "flow dominance",
        n1_fr > runner_up,
        format!("N1->FR {n1_fr} payments, largest other pair {runner_up}"),
    );
}

/// Every `s` with `rotate(b, s) == a`, by direct comparison.
fn oracle_shifts(a: &[f64], b: &[f64]) -> Vec<i64> {
    (0..168).filter(|s| rotate(b, *s) == a).collect()
}

fn criterion_exact_shifts(g: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bases: Vec<(&str, Vec<f64>)> = Vec::new();
    bases.push((
        "uniform random",
        (0..168).map(|_| rng.random::<f64>()).collect(),
    ));
    let day: Vec<f64> = synth::DEFAULT_DAILY_PROFILE.to_vec();
    bases.push((
        "human-like",
        (0..168)
            .map(|i| day[i % 24] * if i / 24 >= 5 { 0.5 } else { 1.0 })
            .collect(),
    ));
    let mut spike = vec![0.0; 168];
    spike[40] = 1.0;
    bases.push(("single spike", spike));
    let mut sparse = vec![0.0; 168];
    for i in [3, 50, 51, 120] {
        sparse[i] = rng.random_range(0.1..1.0);
    }
    bases.push(("sparse", sparse));

    let mut failures = Vec::new();
    for (name, base) in &bases {
        let s: f64 = base.iter().sum();
        let base: Vec<f64> = base.iter().map(|v| v / s).collect();
        let rows: Vec<Vec<f64>> = (0..24).map(|k| rotate(&base, k)).collect();
        let r = align(&rows, &AlignParams::default()).expect("valid rows");
        g.logs.push(r.log.clone());
        let mut bad_pairs = 0;
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let rel = (r.rotations[j] as i64 - r.rotations[i] as i64).rem_euclid(168);
                let oracle = oracle_shifts(&rows[i], &rows[j]);
                let tz_rel = (i64::from(r.shifts[i]) - i64::from(r.shifts[j])).rem_euclid(24);
                if !oracle.contains(&rel) || tz_rel != (i as i64 - j as i64).rem_euclid(24) {
                    bad_pairs += 1;
                }
            }
        }
        if bad_pairs > 0 || r.total_error != 0.0 {
            failures.push(format!(
                "{name}: {bad_pairs} bad pairs, total_error {}",
                r.total_error
            ));
        }
    }
    g.report(
        5,
        "exact shift recovery",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} base patterns x 24 rotations: all 576 pairs match the brute-force oracle, total_error 0", bases.len())
        } else {
            failures.join("; ")
        },
    );
}

fn criterion_noisy_shifts(g: &mut Gate) {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    let scenarios = [
        (
            "yearly",
            SynthConfig {
                seed: 2024,
                n_businesses: 36,
                ..SynthConfig::default()
            },
            PeriodKind::Year,
        ),
        (
            "monthly, sparse",
            SynthConfig {
                seed: 99,
                n_businesses: 36,
                payments_per_business_day: 8,
                ..SynthConfig::default()
            },
            PeriodKind::Month,
        ),
    ];
    for (name, cfg, period) in scenarios {
        let zones: BTreeSet<i32> = cfg.business_tz.iter().copied().collect();
        let out = synth::generate(&cfg).expect("valid config");
        let map = cluster_addresses(&out.transactions);
        let (payments, _) = extract_payments(
            &out.transactions,
            &map,
            &out.prices,
            &Thresholds::default(),
            realecon::ingest::FillPolicy::Strict,
        )
        .expect("consistent map");
        let labels = classify_all(&payments, &FrParams::default());
        let wanted = fr_entities_by_period(&labels, period);
        let built = build_patterns(&payments, &wanted, period, AOE_OFFSET_HOURS);
        for p in &built {
            g.patterns_checked += 1;
            if (p.w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                g.pattern_sum_violations += 1;
            }
        }
        let kept = filter_noisy(built.clone(), 80);
        let rows: Vec<Vec<f64>> = kept.iter().map(|p| p.w.clone()).collect();
        let r = align(&rows, &AlignParams::default()).expect("patterns survive");
        g.logs.push(r.log.clone());

        let planted = synth::planted_of_entities(&out.ground_truth, &map);
        let truth_tz = |e: EntityId| {
            planted
                .get(&e)
                .copied()
                .flatten()
                .map(|p| &out.ground_truth.entities[p])
                .filter(|p| p.kind == EntityKind::Business)
                .map(|p| f64::from(p.tz))
        };
        // Three anchors: the first businesses in planted order.
        let mut anchors = Vec::new();
        let mut seen = BTreeSet::new();
        for (p, s) in kept.iter().zip(&r.shifts) {
            if let Some(tz) = truth_tz(p.entity) {
                if seen.len() < 3 && seen.insert(p.entity) {
                    anchors.push((estimate_shift(&[*s], 0.0).expect("single shift"), tz));
                }
            }
        }
        let offset = calibrate(&anchors).expect("anchors").offset;
        let mut within = 0;
        let mut by_year: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
        for (p, s) in kept.iter().zip(&r.shifts) {
            let est = estimate_shift(&[*s], offset).expect("single shift");
            if truth_tz(p.entity).is_some_and(|tz| circular_distance(est, tz) <= 2.0) {
                within += 1;
            }
            by_year
                .entry(p.period.year())
                .or_default()
                .push(est.round() as i32);
        }
        g.distributions
            .push(tz_distribution(&by_year, NormalizationMode::Yearly));
        g.distributions
            .push(tz_distribution(&by_year, NormalizationMode::Global));
        let frac = within as f64 / kept.len().max(1) as f64;
        ok &= frac >= 0.9 && zones.len() >= 6;
        lines.push(format!(
            "{name}: {within}/{} surviving patterns ({:.1}%) within 2 h over {} zones ({} built)",
            kept.len(),
            100.0 * frac,
            zones.len(),
            built.len()
        ));
    }
    let elapsed = t0.elapsed();
    g.report(
        6,
        "noisy planted shift recovery",
        ok && elapsed < Duration::from_secs(120),
        format!(
            "{}; {} (limit 120 s, min 90%)",
            lines.join("; "),
            secs(elapsed)
        ),
    );
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .expect("readable")
        .map(|e| e.expect("entry").path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            let rel = p
                .strip_prefix(root)
                .expect("under root")
                .display()
                .to_string();
            out.insert(rel, std::fs::read(&p).expect("readable"));
        }
    }
}

fn criterion_determinism(g: &mut Gate) {
    let t0 = Instant::now();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = PipelineConfig {
            workdir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let synth_cfg = SynthConfig::default();
        let run = pipeline::synth_stage(&cfg, &synth_cfg)
            .and_then(|_| pipeline::report(&cfg))
            .and_then(|_| cfg.write_snapshot());
        if let Err(e) = run {
            g.report(9, "determinism", false, format!("pipeline failed: {e}"));
            return;
        }
        let log =
            std::fs::read_to_string(cfg.artifact(pipeline::ALIGNMENT_LOG)).expect("log written");
        g.logs.push(
            log.lines()
                .skip(1)
                .map(|l| {
                    let (i, e) = l.split_once(',').expect("two columns");
                    (i.parse().expect("iteration"), e.parse().expect("error"))
                })
                .collect(),
        );
        let mut files = BTreeMap::new();
        collect_files(dir.path(), dir.path(), &mut files);
        trees.push(files);
    }
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same = differing.is_empty() && trees[0].len() == trees[1].len();
    g.report(
        9,
        "determinism",
        same,
        format!(
            "two full runs, {} artifacts each, {} differ, {}",
            trees[0].len(),
            differing.len(),
            secs(t0.elapsed())
        ),
    );
}

fn main() -> ExitCode {
    let mut g = Gate::default();
    criterion_clustering(&mut g);
    criterion_filter_partition(&mut g);
    criteria_fr_and_flows(&mut g);
    criterion_exact_shifts(&mut g);
    criterion_noisy_shifts(&mut g);
    criterion_determinism(&mut g);

    let steps: usize = g.logs.iter().map(|l| l.len().saturating_sub(1)).sum();
    let increases = g
        .logs
        .iter()
        .flat_map(|l| l.windows(2))
        .filter(|w| w[1].1 > w[0].1)
        .count();
    g.report(
        7,
        "alignment monotonicity",
        increases == 0 && !g.logs.is_empty(),
        format!(
            "{} alignment runs, {steps} accepted steps, {increases} increases",
            g.logs.len()
        ),
    );

    let mut bad_rows = 0;
    let mut rows = 0;
    for d in &g.distributions {
        match d.mode {
            NormalizationMode::Yearly => {
                for r in &d.values {
                    rows += 1;
                    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        bad_rows += 1;
                    }
                }
            }
            NormalizationMode::Global => {
                rows += 1;
                if (d.values.iter().flatten().sum::<f64>() - 1.0).abs() > 1e-9 {
                    bad_rows += 1;
                }
            }
        }
    }
    g.report(
        8,
        "normalization identities",
        g.pattern_sum_violations == 0 && bad_rows == 0 && g.patterns_checked > 0,
        format!(
            "{} patterns, {} violations; {rows} distribution sums, {bad_rows} violations (tolerance 1e-9)",
            g.patterns_checked, g.pattern_sum_violations
        ),
    );
    g.lines.sort_by_key(|(id, _)| *id);
    for (_, line) in &g.lines {
        println!("{line}");
    }
    if g.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", g.failed);
        ExitCode::FAILURE
    }
}
