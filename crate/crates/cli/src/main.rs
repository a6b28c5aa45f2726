//! `realecon`: staged command-line pipeline.
//!
//! Configuration is resolved from defaults, then `--config` (or
//! `REALECON_CONFIG`), then `REALECON_<KEY>` environment variables, then
//! flags. Exit codes: 0 success, 1 usage, 2 invalid input, 3 consistency.

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use realecon::pipeline::{self, PipelineConfig, PipelineError, ENV_PREFIX};
use realecon::synth::{PriceCurve, SynthConfig};

#[derive(Parser, Debug)]
#[command(
    name = "realecon",
    version,
    about = "Real-economy payment analysis pipeline"
)]
struct Cli {
    #[command(flatten)]
    opts: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config keys.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for all artifacts [default: ./out].
    #[arg(long, global = true)]
    workdir: Option<String>,
    /// JSONL transactions [default: <workdir>/transactions.jsonl].
    #[arg(long, global = true)]
    transactions: Option<String>,
    /// Daily price CSV [default: <workdir>/prices.csv].
    #[arg(long, global = true)]
    prices: Option<String>,
    #[arg(long, global = true, value_name = "USD")]
    min_usd: Option<String>,
    #[arg(long, global = true, value_name = "USD")]
    max_usd: Option<String>,
    #[arg(long, global = true, value_name = "DAYS")]
    required_active_days: Option<String>,
    #[arg(long, global = true, value_name = "COUNT")]
    required_other_tx: Option<String>,
    /// Hour offset of the pattern reference zone.
    #[arg(long, global = true, value_name = "HOURS", allow_hyphen_values = true)]
    reference_offset: Option<String>,
    #[arg(long, global = true, value_name = "SLOTS")]
    max_zero_slots: Option<String>,
    #[arg(long, global = true)]
    max_iterations: Option<String>,
    /// Rows tried as the initial alignment template.
    #[arg(long, global = true)]
    seed_candidates: Option<String>,
    /// `strict` or `forward:<days>`.
    #[arg(long, global = true)]
    price_fill: Option<String>,
    /// Pattern period: `year` or `month`.
    #[arg(long, global = true)]
    period: Option<String>,
    /// CSV `entity_id,true_gmt_offset`.
    #[arg(long, global = true)]
    anchors: Option<String>,
    /// Planted ground truth CSV [default: <workdir>/ground_truth.csv if present].
    #[arg(long, global = true)]
    ground_truth: Option<String>,
    #[arg(long, global = true)]
    anchor_count: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("workdir", &self.workdir),
            ("transactions", &self.transactions),
            ("prices", &self.prices),
            ("min_usd", &self.min_usd),
            ("max_usd", &self.max_usd),
            ("required_active_days", &self.required_active_days),
            ("required_other_tx", &self.required_other_tx),
            ("reference_offset", &self.reference_offset),
            ("max_zero_slots", &self.max_zero_slots),
            ("max_iterations", &self.max_iterations),
            ("seed_candidates", &self.seed_candidates),
            ("price_fill", &self.price_fill),
            ("period", &self.period),
            ("anchors", &self.anchors),
            ("ground_truth", &self.ground_truth),
            ("anchor_count", &self.anchor_count),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate transactions and prices, listing every malformed line.
    IngestCheck,
    /// Cluster addresses into entities.
    Cluster,
    /// Extract filtered payments between entities.
    Payments,
    /// Label entities FR / N1 / TO per month.
    Classify,
    /// Aggregate payment flows between categories.
    Flows,
    /// Build weekly patterns of FR entities.
    Patterns,
    /// Align weekly patterns by hour rotation.
    Align,
    /// Estimate time zones and their distribution.
    Geo,
    /// Generate a synthetic stream with ground truth.
    Synth(SynthArgs),
    /// Run every stage and write figure-ready tables.
    Report,
    /// Compare estimated shifts against known anchors.
    ValidateTz,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    months: u32,
    /// First UTC day, YYYY-MM-DD.
    #[arg(long, default_value = "2018-01-01")]
    start: NaiveDate,
    #[arg(long, default_value_t = 24)]
    businesses: usize,
    #[arg(long, default_value_t = 600)]
    customers: usize,
    /// Comma-separated business GMT offsets, assigned round-robin.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tz: Option<Vec<i32>>,
    #[arg(long)]
    payments_per_day: Option<u32>,
    #[arg(long)]
    weekend_damping: Option<f64>,
    #[arg(long)]
    expenses_per_month: Option<u32>,
    #[arg(long)]
    p2p_per_month: Option<f64>,
    #[arg(long)]
    dust_rate: Option<f64>,
    #[arg(long)]
    macro_rate: Option<f64>,
    #[arg(long)]
    addresses_per_entity: Option<usize>,
    /// `constant:<usd>` or `drift:<usd>:<daily_change>:<gap_every>`.
    #[arg(long)]
    price_curve: Option<PriceCurve>,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            seed: self.seed,
            start: self.start,
            months: self.months,
            n_businesses: self.businesses,
            n_customers: self.customers,
            business_tz: self.tz.clone().unwrap_or(d.business_tz),
            daily_profile: d.daily_profile,
            weekend_damping: self.weekend_damping.unwrap_or(d.weekend_damping),
            payments_per_business_day: self.payments_per_day.unwrap_or(d.payments_per_business_day),
            expenses_per_month: self.expenses_per_month.unwrap_or(d.expenses_per_month),
            p2p_per_customer_month: self.p2p_per_month.unwrap_or(d.p2p_per_customer_month),
            dust_rate: self.dust_rate.unwrap_or(d.dust_rate),
            macro_rate: self.macro_rate.unwrap_or(d.macro_rate),
            addresses_per_entity: self.addresses_per_entity.unwrap_or(d.addresses_per_entity),
            price: self.price_curve.clone().unwrap_or(d.price),
        }
    }
}

fn resolve(flags: &ConfigFlags) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::default();
    let file = flags
        .config
        .clone()
        .or_else(|| std::env::var_os(format!("{ENV_PREFIX}CONFIG")).map(PathBuf::from));
    if let Some(path) = file {
        let text =
            std::fs::read_to_string(&path).map_err(|source| PipelineError::Io { path, source })?;
        cfg.apply_kv(&text)?;
    }
    cfg.apply_env(std::env::vars())?;
    for (k, v) in flags.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    let cfg = resolve(&cli.opts)?;
    let summary = match &cli.command {
        Command::IngestCheck => pipeline::ingest_check(&cfg),
        Command::Cluster => pipeline::cluster(&cfg),
        Command::Payments => pipeline::payments(&cfg),
        Command::Classify => pipeline::classify(&cfg),
        Command::Flows => pipeline::flows(&cfg),
        Command::Patterns => pipeline::patterns(&cfg),
        Command::Align => pipeline::align_stage(&cfg),
        Command::Geo => pipeline::geo(&cfg),
        Command::Synth(args) => pipeline::synth_stage(&cfg, &args.config()),
        Command::Report => pipeline::report(&cfg),
        Command::ValidateTz => pipeline::validate_tz(&cfg),
    }?;
    cfg.write_snapshot()?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
