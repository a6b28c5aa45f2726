//! File-based pipeline stages shared by the command-line tool.
//!
//! Every stage reads its inputs from the work directory (or the configured
//! transaction and price paths), writes CSV artifacts back into it and
//! returns a one-line summary. Artifacts are written whole, so re-running a
//! stage on unchanged inputs reproduces identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classify::{
    aggregate_flows, classify_all, read_labels_csv, write_category_stats_csv, write_flows_csv,
    write_labels_csv, ClassifyError, FlowMatrix, FrParams,
};
use crate::cluster::{cluster_addresses, EntityId, EntityMap};
use crate::ingest::{
    parse_prices, parse_transactions, write_prices, write_transactions, FillPolicy, PriceTable,
    RawTransaction, TxScan, AOE_OFFSET_HOURS, WEEK_HOURS,
};
use crate::payments::{
    extract_payments, read_payments_csv, total_vs_filtered_ratio, write_payments_csv, FilterReport,
    Payment, Thresholds,
};
use crate::synth::{self, GroundTruth, SynthConfig, SynthError};
use crate::temporal::{
    align, aligned_rows, build_patterns, calibrate, estimate_shift, filter_noisy, format_offset,
    fr_entities_by_period, read_alignment_csv, read_anchors_csv, read_patterns_csv,
    shifts_by_entity, tz_distribution, wrap_hours, write_alignment_csv, write_iteration_log_csv,
    write_patterns_csv, write_tz_distribution_csv, AlignParams, AlignedRow, NormalizationMode,
    PeriodKind, TzDistribution, WeeklyPattern,
};

pub const ENV_PREFIX: &str = "REALECON_";
pub const SNAPSHOT_FILE: &str = "config.resolved";

pub const ENTITY_MAP: &str = "entity_map.csv";
pub const PAYMENTS: &str = "payments.csv";
pub const FILTER_REPORT: &str = "filter_report.csv";
pub const MONTHLY_RATIO: &str = "monthly_ratio.csv";
pub const LABELS: &str = "labels.csv";
pub const FLOWS: &str = "flows.csv";
pub const CATEGORY_STATS: &str = "category_stats.csv";
pub const PATTERNS: &str = "patterns.csv";
pub const ALIGNMENT: &str = "alignment.csv";
pub const ALIGNMENT_LOG: &str = "alignment_log.csv";
pub const ALIGNED_PATTERNS: &str = "aligned_patterns.csv";
pub const TZ_ESTIMATES: &str = "tz_estimates.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const TZ_YEARLY: &str = "tz_yearly.csv";
pub const TZ_GLOBAL: &str = "tz_global.csv";
pub const TZ_VALIDATION: &str = "tz_validation.csv";
pub const INGEST_REPORT: &str = "ingest_report.csv";
pub const ANCHORS: &str = "anchors.csv";
pub const RECOVERY_METRICS: &str = "recovery_metrics.csv";
pub const SYNTH_TRANSACTIONS: &str = "transactions.jsonl";
pub const SYNTH_PRICES: &str = "prices.csv";
pub const SYNTH_GROUND_TRUTH: &str = "ground_truth.csv";
pub const SYNTH_MANIFEST: &str = "synth_manifest.txt";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 usage, 2 input validation, 3 internal consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::MissingArtifact { .. }
            | PipelineError::Input(_)
            | PipelineError::Io { .. } => 2,
            PipelineError::Consistency(_) => 3,
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(format!("{}: {e}", path.display()))
}

fn classify_err(path: &Path, e: ClassifyError) -> PipelineError {
    match e {
        ClassifyError::UnlabeledEntity { .. } => PipelineError::Consistency(e.to_string()),
        e => input_err(path, e),
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Resolved parameters for every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/transactions.jsonl`.
    pub transactions: Option<PathBuf>,
    /// Defaults to `<workdir>/prices.csv`.
    pub prices: Option<PathBuf>,
    pub thresholds: Thresholds,
    pub fr: FrParams,
    pub reference_offset: i32,
    pub max_zero_slots: usize,
    pub align: AlignParams,
    pub price_fill: FillPolicy,
    pub period: PeriodKind,
    pub anchors: Option<PathBuf>,
    /// Defaults to `<workdir>/ground_truth.csv` when that file exists.
    pub ground_truth: Option<PathBuf>,
    /// Businesses used as anchors when deriving them from ground truth.
    pub anchor_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("./out"),
            transactions: None,
            prices: None,
            thresholds: Thresholds::default(),
            fr: FrParams::default(),
            reference_offset: AOE_OFFSET_HOURS,
            max_zero_slots: 80,
            align: AlignParams::default(),
            price_fill: FillPolicy::Strict,
            period: PeriodKind::Year,
            anchors: None,
            ground_truth: None,
            anchor_count: 3,
        }
    }
}

pub const CONFIG_KEYS: [&str; 16] = [
    "workdir",
    "transactions",
    "prices",
    "min_usd",
    "max_usd",
    "required_active_days",
    "required_other_tx",
    "reference_offset",
    "max_zero_slots",
    "max_iterations",
    "seed_candidates",
    "price_fill",
    "period",
    "anchors",
    "ground_truth",
    "anchor_count",
];

impl PipelineConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| PipelineError::Usage(format!("{key}: cannot parse {v:?}")))
        }
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "workdir" => self.workdir = PathBuf::from(value.trim()),
            "transactions" => self.transactions = path(),
            "prices" => self.prices = path(),
            "min_usd" => self.thresholds.min_usd = num(key, value)?,
            "max_usd" => self.thresholds.max_usd = num(key, value)?,
            "required_active_days" => self.fr.required_active_days = num(key, value)?,
            "required_other_tx" => self.fr.required_other_tx = num(key, value)?,
            "reference_offset" => self.reference_offset = num(key, value)?,
            "max_zero_slots" => self.max_zero_slots = num(key, value)?,
            "max_iterations" => self.align.max_iterations = num(key, value)?,
            "seed_candidates" => self.align.seed_candidates = num(key, value)?,
            "price_fill" => {
                self.price_fill = value
                    .trim()
                    .parse()
                    .map_err(|e| PipelineError::Usage(format!("price_fill: {e}")))?
            }
            "period" => {
                self.period = value
                    .trim()
                    .parse()
                    .map_err(|e| PipelineError::Usage(format!("period: {e}")))?
            }
            "anchors" => self.anchors = path(),
            "ground_truth" => self.ground_truth = path(),
            "anchor_count" => self.anchor_count = num(key, value)?,
            _ => return Err(PipelineError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; blank lines and `#` comments are
    /// ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Usage(format!("config line {}: expected key=value", i + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `REALECON_<KEY>` variables, e.g. `REALECON_MIN_USD=1`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                CONFIG_KEYS.contains(&key.as_str()).then_some((key, v))
            })
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Usage(m));
        let t = &self.thresholds;
        if !(t.min_usd >= 0.0 && t.min_usd.is_finite()) {
            return bad(format!("min_usd {} must be finite and >= 0", t.min_usd));
        }
        if !(t.max_usd > t.min_usd && t.max_usd.is_finite()) {
            return bad(format!(
                "max_usd {} must exceed min_usd {}",
                t.max_usd, t.min_usd
            ));
        }
        if !(1..=31).contains(&self.fr.required_active_days) {
            return bad("required_active_days must be in 1..=31".into());
        }
        if !(-12..=14).contains(&self.reference_offset) {
            return bad("reference_offset must be in -12..=14".into());
        }
        if self.max_zero_slots > WEEK_HOURS {
            return bad(format!("max_zero_slots must be at most {WEEK_HOURS}"));
        }
        if self.align.max_iterations == 0 || self.align.seed_candidates == 0 {
            return bad("max_iterations and seed_candidates must be positive".into());
        }
        if self.anchor_count == 0 {
            return bad("anchor_count must be positive".into());
        }
        Ok(())
    }

    pub fn transactions_path(&self) -> PathBuf {
        self.transactions
            .clone()
            .unwrap_or_else(|| self.workdir.join(SYNTH_TRANSACTIONS))
    }

    pub fn prices_path(&self) -> PathBuf {
        self.prices
            .clone()
            .unwrap_or_else(|| self.workdir.join(SYNTH_PRICES))
    }

    pub fn ground_truth_path(&self) -> Option<PathBuf> {
        self.ground_truth.clone().or_else(|| {
            let p = self.workdir.join(SYNTH_GROUND_TRUTH);
            p.is_file().then_some(p)
        })
    }

    /// Explicit anchors, else `<workdir>/anchors.csv` when present.
    pub fn anchors_path(&self) -> Option<PathBuf> {
        self.anchors.clone().or_else(|| {
            let p = self.workdir.join(ANCHORS);
            p.is_file().then_some(p)
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    /// Resolved configuration as `key=value` lines. Paths inside the work
    /// directory are written relative to it so identical runs in different
    /// directories snapshot identically.
    pub fn snapshot(&self) -> String {
        let rel = |p: &Path| -> String {
            p.strip_prefix(&self.workdir)
                .map(|r| r.display().to_string())
                .unwrap_or_else(|_| p.display().to_string())
        };
        let opt = |p: &Option<PathBuf>| p.as_deref().map(rel).unwrap_or_default();
        let mut s = String::from("# paths relative to this directory unless absolute\n");
        let lines = [
            ("transactions", rel(&self.transactions_path())),
            ("prices", rel(&self.prices_path())),
            ("min_usd", self.thresholds.min_usd.to_string()),
            ("max_usd", self.thresholds.max_usd.to_string()),
            (
                "required_active_days",
                self.fr.required_active_days.to_string(),
            ),
            ("required_other_tx", self.fr.required_other_tx.to_string()),
            ("reference_offset", self.reference_offset.to_string()),
            ("max_zero_slots", self.max_zero_slots.to_string()),
            ("max_iterations", self.align.max_iterations.to_string()),
            ("seed_candidates", self.align.seed_candidates.to_string()),
            ("price_fill", self.price_fill.to_string()),
            ("period", self.period.to_string()),
            ("anchors", opt(&self.anchors)),
            ("ground_truth", opt(&self.ground_truth_path())),
            ("anchor_count", self.anchor_count.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write_snapshot(&self) -> Result<()> {
        write_bytes(&self.artifact(SNAPSHOT_FILE), self.snapshot().as_bytes())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_bytes(path, &buf)
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn open_artifact(
    cfg: &PipelineConfig,
    name: &str,
    producer: &'static str,
) -> Result<BufReader<File>> {
    let path = cfg.artifact(name);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path, producer });
    }
    open_input(&path)
}

fn load_transactions(cfg: &PipelineConfig) -> Result<Vec<RawTransaction>> {
    let path = cfg.transactions_path();
    parse_transactions(open_input(&path)?).map_err(|e| input_err(&path, e))
}

fn load_prices(cfg: &PipelineConfig) -> Result<PriceTable> {
    let path = cfg.prices_path();
    parse_prices(open_input(&path)?).map_err(|e| input_err(&path, e))
}

fn load_entity_map(cfg: &PipelineConfig) -> Result<EntityMap> {
    EntityMap::read_csv(open_artifact(cfg, ENTITY_MAP, "cluster")?)
        .map_err(|e| input_err(&cfg.artifact(ENTITY_MAP), e))
}

fn load_payments(cfg: &PipelineConfig) -> Result<Vec<Payment>> {
    read_payments_csv(open_artifact(cfg, PAYMENTS, "payments")?)
        .map_err(|e| input_err(&cfg.artifact(PAYMENTS), e))
}

fn load_labels(cfg: &PipelineConfig) -> Result<Vec<crate::classify::MonthLabels>> {
    read_labels_csv(open_artifact(cfg, LABELS, "classify")?)
        .map_err(|e| classify_err(&cfg.artifact(LABELS), e))
}

fn load_alignment(cfg: &PipelineConfig) -> Result<Vec<AlignedRow>> {
    read_alignment_csv(open_artifact(cfg, ALIGNMENT, "align")?)
        .map_err(|e| input_err(&cfg.artifact(ALIGNMENT), e))
}

fn load_anchors(path: &Path) -> Result<Vec<(EntityId, f64)>> {
    read_anchors_csv(open_input(path)?).map_err(|e| input_err(path, e))
}

/// Validates the raw inputs without stopping at the first bad line.
pub fn ingest_check(cfg: &PipelineConfig) -> Result<String> {
    let tx_path = cfg.transactions_path();
    let scan = TxScan::from_reader(open_input(&tx_path)?).map_err(|source| PipelineError::Io {
        path: tx_path.clone(),
        source,
    })?;
    let prices_path = cfg.prices_path();
    let prices = parse_prices(open_input(&prices_path)?);
    write_with(&cfg.artifact(INGEST_REPORT), |w| {
        writeln!(w, "source,line,error")?;
        for p in &scan.problems {
            let msg = p.to_string().replace(['\n', ','], " ");
            writeln!(w, "transactions,{},{msg}", p.line().unwrap_or(0))?;
        }
        if let Err(e) = &prices {
            let msg = e.to_string().replace(['\n', ','], " ");
            writeln!(w, "prices,{},{msg}", e.line().unwrap_or(0))?;
        }
        Ok(())
    })?;
    let summary = format!(
        "{} transactions, {} malformed lines; prices {}",
        scan.transactions.len(),
        scan.malformed_count(),
        match &prices {
            Ok(p) => format!("ok ({} days)", p.len()),
            Err(_) => "invalid".into(),
        }
    );
    if scan.malformed_count() > 0 || prices.is_err() {
        return Err(PipelineError::Input(format!(
            "{summary}; see {}",
            cfg.artifact(INGEST_REPORT).display()
        )));
    }
    Ok(summary)
}

pub fn cluster(cfg: &PipelineConfig) -> Result<String> {
    let txs = load_transactions(cfg)?;
    let map = cluster_addresses(&txs);
    write_with(&cfg.artifact(ENTITY_MAP), |w| map.write_csv(w))?;
    Ok(format!(
        "{} addresses in {} entities from {} transactions",
        map.address_count(),
        map.entity_count(),
        txs.len()
    ))
}

pub fn payments(cfg: &PipelineConfig) -> Result<String> {
    let map = load_entity_map(cfg)?;
    let txs = load_transactions(cfg)?;
    let prices = load_prices(cfg)?;
    let (payments, report) = extract_payments(&txs, &map, &prices, &cfg.thresholds, cfg.price_fill)
        .map_err(|e| input_err(&cfg.transactions_path(), e))?;
    let totals = report.totals();
    if totals.kept != payments.len() as u64 {
        return Err(PipelineError::Consistency(format!(
            "{} kept outputs but {} payments",
            totals.kept,
            payments.len()
        )));
    }
    write_with(&cfg.artifact(PAYMENTS), |w| {
        write_payments_csv(w, &payments)
    })?;
    write_with(&cfg.artifact(FILTER_REPORT), |w| report.write_csv(w))?;
    write_with(&cfg.artifact(MONTHLY_RATIO), |w| {
        write_monthly_ratio(w, &report, &payments)
    })?;
    Ok(format!(
        "{} payments kept of {} outputs (change {}, missing price {}, dust {}, macro {})",
        totals.kept,
        totals.total(),
        totals.change,
        totals.missing_price,
        totals.dust,
        totals.macro_
    ))
}

/// `year,month,total_outputs,kept_payments,kept_usd,ratio`.
fn write_monthly_ratio<W: Write>(
    mut w: W,
    report: &FilterReport,
    payments: &[Payment],
) -> std::io::Result<()> {
    let totals = report.total_series();
    let kept = report.kept_series();
    let ratio = total_vs_filtered_ratio(&totals, &kept);
    let mut usd: BTreeMap<_, f64> = BTreeMap::new();
    for p in payments {
        *usd.entry(p.month()).or_default() += p.value_usd;
    }
    writeln!(w, "year,month,total_outputs,kept_payments,kept_usd,ratio")?;
    for (m, r) in ratio {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.year,
            m.month,
            totals.get(&m).copied().unwrap_or(0),
            kept.get(&m).copied().unwrap_or(0),
            usd.get(&m).copied().unwrap_or(0.0),
            r
        )?;
    }
    Ok(())
}

pub fn classify(cfg: &PipelineConfig) -> Result<String> {
    let payments = load_payments(cfg)?;
    let labels = classify_all(&payments, &cfg.fr);
    write_with(&cfg.artifact(LABELS), |w| write_labels_csv(w, &labels))?;
    let count = |c| {
        labels
            .iter()
            .map(|m| m.with_category(c).count())
            .sum::<usize>()
    };
    use crate::classify::Category;
    Ok(format!(
        "{} months labeled: {} FR, {} N1, {} TO entity-months",
        labels.len(),
        count(Category::Fr),
        count(Category::N1),
        count(Category::To)
    ))
}

fn compute_flows(cfg: &PipelineConfig) -> Result<Vec<FlowMatrix>> {
    let payments = load_payments(cfg)?;
    let labels = load_labels(cfg)?;
    let by_month = crate::classify::group_by_month(&payments);
    let labeled: BTreeSet<_> = labels.iter().map(|l| l.month).collect();
    if let Some(m) = by_month.keys().find(|m| !labeled.contains(m)) {
        return Err(PipelineError::Consistency(format!(
            "no labels for month {m}"
        )));
    }
    labels
        .iter()
        .map(|ml| {
            let ps = by_month.get(&ml.month).map(Vec::as_slice).unwrap_or(&[]);
            let f = aggregate_flows(ml.month, ps, ml)
                .map_err(|e| classify_err(&cfg.artifact(LABELS), e))?;
            f.check_identities(ps.len() as u64)
                .map_err(PipelineError::Consistency)?;
            Ok(f)
        })
        .collect()
}

pub fn flows(cfg: &PipelineConfig) -> Result<String> {
    let flows = compute_flows(cfg)?;
    write_with(&cfg.artifact(FLOWS), |w| write_flows_csv(w, &flows))?;
    write_with(&cfg.artifact(CATEGORY_STATS), |w| {
        write_category_stats_csv(w, &flows)
    })?;
    let total: u64 = flows.iter().map(FlowMatrix::total_count).sum();
    Ok(format!(
        "{} payments aggregated over {} months",
        total,
        flows.len()
    ))
}

pub fn patterns(cfg: &PipelineConfig) -> Result<String> {
    let payments = load_payments(cfg)?;
    let labels = load_labels(cfg)?;
    let wanted = fr_entities_by_period(&labels, cfg.period);
    let all = build_patterns(&payments, &wanted, cfg.period, cfg.reference_offset);
    let built = all.len();
    let kept = filter_noisy(all, cfg.max_zero_slots);
    check_pattern_sums(&kept)?;
    write_with(&cfg.artifact(PATTERNS), |w| write_patterns_csv(w, &kept))?;
    Ok(format!(
        "{} FR patterns built, {} kept after noise filter (<= {} empty hours)",
        built,
        kept.len(),
        cfg.max_zero_slots
    ))
}

fn check_pattern_sums(patterns: &[WeeklyPattern]) -> Result<()> {
    for p in patterns {
        let s: f64 = p.w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Consistency(format!(
                "pattern of entity {} in {} sums to {s}",
                p.entity, p.period
            )));
        }
    }
    Ok(())
}

pub fn align_stage(cfg: &PipelineConfig) -> Result<String> {
    let patterns = read_patterns_csv(open_artifact(cfg, PATTERNS, "patterns")?)
        .map_err(|e| input_err(&cfg.artifact(PATTERNS), e))?;
    let (rows, log, aligned) = if patterns.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        let ws: Vec<Vec<f64>> = patterns.iter().map(|p| p.w.clone()).collect();
        let result = align(&ws, &cfg.align).map_err(|e| input_err(&cfg.artifact(PATTERNS), e))?;
        if result.log.windows(2).any(|p| p[1].1 > p[0].1) {
            return Err(PipelineError::Consistency(
                "alignment error increased".into(),
            ));
        }
        let aligned: Vec<WeeklyPattern> = patterns
            .iter()
            .zip(&result.aligned)
            .map(|(p, w)| WeeklyPattern {
                entity: p.entity,
                period: p.period,
                w: w.clone(),
            })
            .collect();
        (aligned_rows(&patterns, &result), result.log, aligned)
    };
    write_with(&cfg.artifact(ALIGNMENT), |w| write_alignment_csv(w, &rows))?;
    write_with(&cfg.artifact(ALIGNMENT_LOG), |w| {
        write_iteration_log_csv(w, &log)
    })?;
    write_with(&cfg.artifact(ALIGNED_PATTERNS), |w| {
        write_patterns_csv(w, &aligned)
    })?;
    let final_error = log.last().map_or(0.0, |l| l.1);
    Ok(format!(
        "{} patterns aligned in {} accepted iterations, total error {final_error:.6}",
        rows.len(),
        log.len()
    ))
}

/// Per-entity shift estimates before calibration.
fn uncalibrated_estimates(rows: &[AlignedRow]) -> BTreeMap<EntityId, f64> {
    shifts_by_entity(rows)
        .into_iter()
        .filter_map(|(e, ps)| {
            let s: Vec<u8> = ps.iter().map(|(_, s)| *s).collect();
            estimate_shift(&s, 0.0).ok().map(|v| (e, v))
        })
        .collect()
}

/// Anchor with its uncalibrated estimate, true offset and residual.
type AnchorRow = (EntityId, f64, f64, f64);

/// Calibration offset and residual rows for the anchors that have an
/// estimate. Errors when none does.
fn calibration_from(
    estimates: &BTreeMap<EntityId, f64>,
    anchors: &[(EntityId, f64)],
) -> Result<(f64, Vec<AnchorRow>)> {
    let usable: Vec<(EntityId, f64, f64)> = anchors
        .iter()
        .filter_map(|(e, truth)| estimates.get(e).map(|est| (*e, *est, *truth)))
        .collect();
    let pairs: Vec<(f64, f64)> = usable.iter().map(|(_, est, t)| (*est, *t)).collect();
    let cal = calibrate(&pairs).map_err(|e| PipelineError::Input(e.to_string()))?;
    let rows = usable
        .iter()
        .zip(&cal.residuals)
        .map(|((e, est, t), r)| (*e, *est, *t, *r))
        .collect();
    Ok((cal.offset, rows))
}

pub struct GeoOutcome {
    pub offset: f64,
    /// Calibrated estimate per entity over all its periods.
    pub estimates: BTreeMap<EntityId, f64>,
    pub yearly: TzDistribution,
    pub global: TzDistribution,
    /// `(entity, year, calibrated estimate)`.
    pub yearly_estimates: Vec<(EntityId, i32, f64)>,
    pub anchors: Vec<AnchorRow>,
}

fn check_distribution(d: &TzDistribution) -> Result<()> {
    let sums: Vec<f64> = d.values.iter().map(|r| r.iter().sum()).collect();
    let ok = match d.mode {
        NormalizationMode::Yearly => sums.iter().all(|s| *s == 0.0 || (s - 1.0).abs() <= 1e-9),
        NormalizationMode::Global => {
            let t: f64 = sums.iter().sum();
            t == 0.0 || (t - 1.0).abs() <= 1e-9
        }
    };
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Consistency(format!(
            "{} time-zone distribution sums {sums:?}",
            d.mode.as_str()
        )))
    }
}

fn geo_compute(
    cfg: &PipelineConfig,
    anchors: Option<&[(EntityId, f64)]>,
) -> Result<GeoOutcome> {
    let rows = load_alignment(cfg)?;
    let raw = uncalibrated_estimates(&rows);
    let (offset, cal_rows) = match anchors {
        Some(a) => calibration_from(&raw, a)?,
        None => (0.0, Vec::new()),
    };
    let mut per_year: BTreeMap<(EntityId, i32), Vec<u8>> = BTreeMap::new();
    for r in &rows {
        per_year
            .entry((r.entity, r.period.year()))
            .or_default()
            .push(r.shift);
    }
    let mut by_year: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
    let mut yearly_estimates = Vec::new();
    for ((e, year), shifts) in per_year {
        let slot = by_year.entry(year).or_default();
        if let Ok(est) = estimate_shift(&shifts, offset) {
            slot.push(wrap_hours(est.round()) as i32);
            yearly_estimates.push((e, year, est));
        }
    }
    let yearly = tz_distribution(&by_year, NormalizationMode::Yearly);
    let global = tz_distribution(&by_year, NormalizationMode::Global);
    check_distribution(&yearly)?;
    check_distribution(&global)?;
    let estimates = raw
        .into_iter()
        .map(|(e, v)| (e, wrap_hours(v + offset)))
        .collect();
    Ok(GeoOutcome {
        offset,
        estimates,
        yearly,
        global,
        yearly_estimates,
        anchors: cal_rows,
    })
}

fn run_geo(cfg: &PipelineConfig, anchors: Option<&[(EntityId, f64)]>) -> Result<GeoOutcome> {
    let geo = geo_compute(cfg, anchors)?;
    write_with(&cfg.artifact(TZ_ESTIMATES), |w| {
        writeln!(w, "entity_id,year,estimated_shift,gmt_offset")?;
        for (e, year, est) in &geo.yearly_estimates {
            writeln!(
                w,
                "{e},{year},{},{}",
                format_offset(*est),
                wrap_hours(est.round()) as i32
            )?;
        }
        Ok(())
    })?;
    write_with(&cfg.artifact(CALIBRATION), |w| {
        writeln!(
            w,
            "offset,entity_id,uncalibrated_shift,true_gmt_offset,residual"
        )?;
        for (e, est, t, r) in &geo.anchors {
            writeln!(
                w,
                "{},{e},{},{t},{}",
                format_offset(geo.offset),
                format_offset(*est),
                format_offset(*r)
            )?;
        }
        Ok(())
    })?;
    write_with(&cfg.artifact(TZ_YEARLY), |w| {
        write_tz_distribution_csv(w, &geo.yearly)
    })?;
    write_with(&cfg.artifact(TZ_GLOBAL), |w| {
        write_tz_distribution_csv(w, &geo.global)
    })?;
    Ok(geo)
}

pub fn geo(cfg: &PipelineConfig) -> Result<String> {
    let anchors = cfg
        .anchors_path()
        .as_deref()
        .map(load_anchors)
        .transpose()?;
    let g = run_geo(cfg, anchors.as_deref())?;
    Ok(format!(
        "{} entities placed over {} years, calibration offset {}",
        g.estimates.len(),
        g.yearly.years.len(),
        format_offset(g.offset)
    ))
}

/// Joins anchors with calibrated estimates:
/// `entity,expected_offset,estimated_shift,residual`.
pub fn validate_tz(cfg: &PipelineConfig) -> Result<String> {
    let path = cfg.anchors_path().ok_or_else(|| {
        PipelineError::Usage(format!(
            "validate-tz needs --anchors or {ANCHORS} in the workdir"
        ))
    })?;
    let anchors = load_anchors(&path)?;
    let rows = load_alignment(cfg)?;
    let raw = uncalibrated_estimates(&rows);
    let (offset, cal_rows) = calibration_from(&raw, &anchors)?;
    write_with(&cfg.artifact(TZ_VALIDATION), |w| {
        writeln!(w, "entity,expected_offset,estimated_shift,residual")?;
        for (e, est, t, r) in &cal_rows {
            writeln!(
                w,
                "{e},{},{},{}",
                format_offset(*t),
                format_offset(wrap_hours(est + offset)),
                format_offset(*r)
            )?;
        }
        Ok(())
    })?;
    let max = cal_rows.iter().fold(0.0_f64, |m, r| m.max(r.3.abs()));
    Ok(format!(
        "{} of {} anchors have estimates; offset {}, max residual {max:.2} h",
        cal_rows.len(),
        anchors.len(),
        format_offset(offset)
    ))
}

/// Writes a synthetic stream, its prices, ground truth and manifest.
pub fn synth_stage(cfg: &PipelineConfig, synth_cfg: &SynthConfig) -> Result<String> {
    let out = synth::generate(synth_cfg).map_err(|e| match e {
        SynthError::InvalidConfig(m) => PipelineError::Usage(m),
        e => PipelineError::Input(e.to_string()),
    })?;
    write_with(&cfg.transactions_path(), |w| {
        write_transactions(w, &out.transactions)
    })?;
    write_with(&cfg.prices_path(), |w| write_prices(w, &out.prices))?;
    write_with(&cfg.artifact(SYNTH_GROUND_TRUTH), |w| {
        out.ground_truth.write_csv(w)
    })?;
    write_bytes(
        &cfg.artifact(SYNTH_MANIFEST),
        synth_cfg.manifest().as_bytes(),
    )?;
    Ok(format!(
        "{} transactions, {} businesses, {} customers, seed {}",
        out.transactions.len(),
        synth_cfg.n_businesses,
        synth_cfg.n_customers,
        synth_cfg.seed
    ))
}

/// Anchors for the first `count` planted businesses that received an
/// alignment.
pub fn derive_anchors(
    truth: &GroundTruth,
    map: &EntityMap,
    aligned: &BTreeSet<EntityId>,
    count: usize,
) -> Vec<(EntityId, f64)> {
    truth
        .businesses()
        .filter_map(|b| map.get(&b.addresses[0]).map(|e| (e, f64::from(b.tz))))
        .filter(|(e, _)| aligned.contains(e))
        .take(count)
        .collect()
}

/// Runs every analysis stage, then writes figure-ready tables under
/// `report/` and, with ground truth, recovery metrics.
pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let mut lines = vec![
        cluster(cfg)?,
        payments(cfg)?,
        classify(cfg)?,
        flows(cfg)?,
        patterns(cfg)?,
        align_stage(cfg)?,
    ];
    let truth = cfg
        .ground_truth_path()
        .map(|p| GroundTruth::read_csv(open_input(&p)?).map_err(|e| input_err(&p, e)))
        .transpose()?;
    let map = load_entity_map(cfg)?;
    let aligned_entities: BTreeSet<EntityId> =
        load_alignment(cfg)?.iter().map(|r| r.entity).collect();
    let mut cfg = cfg.clone();
    match (&cfg.anchors, &truth) {
        (Some(_), _) => {}
        (None, Some(t)) => {
            // Anchors derived from ground truth replace any earlier file.
            let anchors = derive_anchors(t, &map, &aligned_entities, cfg.anchor_count);
            let path = cfg.artifact(ANCHORS);
            if anchors.is_empty() {
                let _ = fs::remove_file(&path);
            } else {
                write_with(&path, |w| {
                    writeln!(w, "entity_id,true_gmt_offset")?;
                    for (e, o) in &anchors {
                        writeln!(w, "{e},{o}")?;
                    }
                    Ok(())
                })?;
                cfg.anchors = Some(path);
            }
        }
        (None, None) => cfg.anchors = cfg.anchors_path(),
    }
    lines.push(geo(&cfg)?);
    if cfg.anchors.is_some() {
        lines.push(validate_tz(&cfg)?);
    }
    let anchors = cfg.anchors.as_deref().map(load_anchors).transpose()?;
    let g = geo_compute(&cfg, anchors.as_deref())?;

    let dir = cfg.workdir.join(REPORT_DIR);
    let copy = |from: &str, to: &str| -> Result<()> {
        let src = cfg.artifact(from);
        let bytes = fs::read(&src).map_err(|source| PipelineError::Io { path: src, source })?;
        write_bytes(&dir.join(to), &bytes)
    };
    copy(MONTHLY_RATIO, "monthly_volume.csv")?;
    copy(CATEGORY_STATS, "category_activity.csv")?;
    copy(FLOWS, "category_pairs.csv")?;
    copy(ALIGNED_PATTERNS, "aligned_heatmap.csv")?;
    copy(TZ_YEARLY, "tz_yearly.csv")?;
    copy(TZ_GLOBAL, "tz_global.csv")?;

    if let Some(t) = &truth {
        let labels = load_labels(&cfg)?;
        let m = synth::score_recovery(t, &map, &labels, &g.estimates);
        write_with(&cfg.artifact(RECOVERY_METRICS), |w| m.write_csv(w))?;
        copy(RECOVERY_METRICS, RECOVERY_METRICS)?;
        lines.push(format!(
            "FR precision {:.3}, recall {:.3}; {}/{} businesses within 2 h",
            m.fr_precision, m.fr_recall, m.within_2h, m.businesses_with_shift
        ));
    }
    Ok(lines.join("\n"))
}
