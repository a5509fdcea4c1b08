use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dynbench::benchmark::{self, Analysis, AnalysisConfig, BenchmarkError, CrashEvents};
use dynbench::exposure::{self, Dimension, ExposureTable, SliceKey};
use dynbench::ingest::{
    self, AdotCodeMap, AdsMileageRecord, CrashFormat, CrashRecord, DropReport, Severity, TimeWindow,
};
use dynbench::report::{self, round_sig, MULTIPLIER_DIGITS, RATE_DIGITS};
use dynbench::stats::{self, Statistic, QUANTILE_RULE};
use dynbench::synth;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{Common, DimensionKind, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum CrashFormatArg {
    #[default]
    Canonical,
    Switrs,
    Adot,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Inputs {
    /// Crash CSV
    #[arg(long)]
    pub crashes: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub crash_format: CrashFormatArg,
    /// InjuryStatus code map (JSON), required for ADOT input
    #[arg(long)]
    pub code_map: Option<PathBuf>,
    /// Road segments (GeoJSON, or CSV with a WKT geometry column)
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Time-of-day shares CSV
    #[arg(long)]
    pub shares: Option<PathBuf>,
    /// ADS mileage CSV
    #[arg(long)]
    pub ads: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Output file (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TimeofdayArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Relative crash rates per window: `window,<severity>,...`
    #[arg(long)]
    pub rates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BucketsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value_t = 10)]
    pub buckets: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TimelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Cumulative ADS miles at which to evaluate, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Output CSV; metadata goes to `<out>.meta.json`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum StatisticArg {
    Unadjusted,
    Dynamic,
    #[default]
    Multiplier,
}

#[derive(Debug, Clone, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_enum, default_value_t)]
    pub statistic: StatisticArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Synthetic county spec (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Canonical crash CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exposure table CSV to write (needs segments or shares, and ADS)
    #[arg(long)]
    pub exposure_out: Option<PathBuf>,
    /// Drop report JSON (stdout when absent)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file =
        File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let hex: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(format!("sha256:{hex}"))
}

#[derive(Default)]
struct Digests(Map<String, Value>);

impl Digests {
    fn add(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.0
            .insert(role.into(), Value::String(sha256_file(path)?));
        Ok(())
    }

    fn value(&self) -> Value {
        Value::Object(self.0.clone())
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Output(e.to_string()))
        }
    }
}

/// One document per severity; a single severity is written unwrapped.
fn emit(out: Option<&Path>, mut docs: Vec<Value>) -> Result<(), CliError> {
    let doc = if docs.len() == 1 {
        docs.remove(0)
    } else {
        Value::Array(docs)
    };
    write_output(out, &report::to_pretty(&doc))
}

fn with_provenance(mut doc: Value, cfg: &RunConfig, digests: &Digests) -> Value {
    if let Value::Object(map) = &mut doc {
        map.insert("config_echo".into(), cfg.echo());
        map.insert("input_digests".into(), digests.value());
    }
    doc
}

type SliceMap = BTreeMap<SliceKey, f64>;

enum AdsInput {
    Records(Vec<AdsMileageRecord>),
    Shares(BTreeMap<SliceKey, f64>),
}

struct Loaded {
    crashes: Vec<CrashRecord>,
    human: BTreeMap<SliceKey, f64>,
    ads: AdsInput,
    digests: Digests,
}

fn crash_format(inputs: &Inputs, digests: &mut Digests) -> Result<CrashFormat, CliError> {
    Ok(match inputs.crash_format {
        CrashFormatArg::Canonical => CrashFormat::Canonical,
        CrashFormatArg::Switrs => CrashFormat::Switrs,
        CrashFormatArg::Adot => {
            let path = inputs
                .code_map
                .as_deref()
                .ok_or_else(|| input_err("--code-map is required for ADOT input"))?;
            digests.add("code_map", path)?;
            CrashFormat::Adot(AdotCodeMap::load(path).map_err(input_err)?)
        }
    })
}

fn load_crashes(
    inputs: &Inputs,
    digests: &mut Digests,
) -> Result<(Vec<CrashRecord>, DropReport), CliError> {
    let path = inputs
        .crashes
        .as_deref()
        .ok_or_else(|| input_err("--crashes is required"))?;
    let format = crash_format(inputs, digests)?;
    digests.add("crashes", path)?;
    ingest::load_crashes(path, &format).map_err(input_err)
}

fn load_human(
    inputs: &Inputs,
    cfg: &RunConfig,
    digests: &mut Digests,
) -> Result<(SliceMap, Option<SliceMap>), CliError> {
    let (human, ads_shares) = match cfg.dimension {
        DimensionKind::Spatial => {
            let path = inputs
                .segments
                .as_deref()
                .ok_or_else(|| input_err("--segments is required for spatial slicing"))?;
            digests.add("segments", path)?;
            let segments = exposure::load_segments(path).map_err(input_err)?;
            let rel =
                exposure::relative_vmt(&segments, cfg.cell_level, cfg.step_m).map_err(input_err)?;
            (exposure::cells_to_slices(&rel), None)
        }
        DimensionKind::Temporal => {
            let path = inputs
                .shares
                .as_deref()
                .ok_or_else(|| input_err("--shares is required for time-of-day slicing"))?;
            digests.add("shares", path)?;
            let shares = exposure::load_time_shares(path).map_err(input_err)?;
            (shares.human, shares.ads)
        }
    };
    let human = match cfg.calibration_target {
        Some(target) => exposure::calibrate(&human, target).map_err(input_err)?,
        None => human,
    };
    Ok((human, ads_shares))
}

fn load_ads(
    inputs: &Inputs,
    cfg: &RunConfig,
    shares: Option<BTreeMap<SliceKey, f64>>,
    digests: &mut Digests,
) -> Result<AdsInput, CliError> {
    match (&inputs.ads, shares) {
        (Some(path), _) => {
            digests.add("ads", path)?;
            let mut records = ingest::load_ads_mileage(path).map_err(input_err)?;
            if let Some(tag) = &cfg.fleet_tag {
                records.retain(|r| r.fleet_tag.as_deref() == Some(tag.as_str()));
                if !(records.iter().map(|r| r.miles).sum::<f64>() > 0.0) {
                    return Err(input_err(format!("no ADS miles with fleet tag {tag:?}")));
                }
            }
            Ok(AdsInput::Records(records))
        }
        (None, Some(shares)) if cfg.fleet_tag.is_none() => Ok(AdsInput::Shares(shares)),
        _ => Err(input_err("--ads is required")),
    }
}

fn load_all(inputs: &Inputs, cfg: &RunConfig) -> Result<Loaded, CliError> {
    let mut digests = Digests::default();
    let (crashes, _) = load_crashes(inputs, &mut digests)?;
    let (human, shares) = load_human(inputs, cfg, &mut digests)?;
    let ads = load_ads(inputs, cfg, shares, &mut digests)?;
    Ok(Loaded {
        crashes,
        human,
        ads,
        digests,
    })
}

impl Loaded {
    fn analysis(&self, cfg: &RunConfig) -> Analysis<'_> {
        let dimension = match cfg.dimension {
            DimensionKind::Spatial => Dimension::Spatial {
                level: cfg.cell_level,
            },
            DimensionKind::Temporal => Dimension::Temporal,
        };
        Analysis::new(
            self.human.clone(),
            &self.crashes,
            AnalysisConfig {
                dimension,
                underreporting: cfg.underreporting,
                warn_threshold: cfg.warn_threshold,
            },
        )
    }

    fn table(
        &self,
        analysis: &Analysis<'_>,
        cfg: &RunConfig,
    ) -> Result<ExposureTable, BenchmarkError> {
        match &self.ads {
            AdsInput::Records(records) => analysis.exposure(records),
            AdsInput::Shares(shares) => Ok(exposure::join_exposure(&self.human, shares)?
                .with_warn_threshold(cfg.warn_threshold)),
        }
    }

    fn records(&self) -> Result<&[AdsMileageRecord], CliError> {
        match &self.ads {
            AdsInput::Records(r) => Ok(r),
            AdsInput::Shares(_) => Err(input_err("this command needs an ADS mileage file (--ads)")),
        }
    }

    fn table_and_events(
        &self,
        cfg: &RunConfig,
        severity: Severity,
    ) -> Result<(ExposureTable, CrashEvents), CliError> {
        let analysis = self.analysis(cfg);
        let table = self.table(&analysis, cfg).map_err(input_err)?;
        let events = analysis.events(&table, severity).map_err(input_err)?;
        Ok((table, events))
    }
}

fn exclusion_check(table: &ExposureTable, cfg: &RunConfig, strict: bool) -> Result<(), CliError> {
    if table.exclusion_warning() {
        let msg = format!(
            "{:.4}% of ADS miles fall in slices without human VMT (threshold {:.4}%)",
            table.excluded_fraction() * 100.0,
            cfg.warn_threshold * 100.0
        );
        if strict {
            return Err(CliError::Strict(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn benchmark_docs(
    loaded: &Loaded,
    cfg: &RunConfig,
) -> Result<(Vec<Value>, Option<ExposureTable>), CliError> {
    let mut docs = Vec::new();
    let mut last = None;
    for &severity in &cfg.severities {
        let (table, events) = loaded.table_and_events(cfg, severity)?;
        let rep = benchmark::report_for_table(&table, &events, severity, cfg.bootstrap().as_ref())
            .map_err(input_err)?;
        docs.push(report::benchmark_json(
            &rep,
            cfg.echo(),
            loaded.digests.value(),
        ));
        last = Some(table);
    }
    Ok((docs, last))
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    let loaded = load_all(&args.inputs, &cfg)?;
    let (docs, table) = benchmark_docs(&loaded, &cfg)?;
    emit(args.out.as_deref(), docs)?;
    match table {
        Some(t) => exclusion_check(&t, &cfg, args.common.strict),
        None => Ok(()),
    }
}

fn read_relative_rates(
    path: &Path,
) -> Result<BTreeMap<Severity, BTreeMap<TimeWindow, f64>>, CliError> {
    let ctx = |m: String| CliError::Input(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ctx(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| ctx(e.to_string()))?.clone();
    let w_col = headers
        .iter()
        .position(|h| h.trim() == "window")
        .ok_or_else(|| ctx("missing column \"window\"".into()))?;
    let columns: Vec<(usize, Severity)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != w_col)
        .map(|(i, h)| h.parse().map(|s| (i, s)).map_err(ctx))
        .collect::<Result<_, _>>()?;
    let mut out: BTreeMap<Severity, BTreeMap<TimeWindow, f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ctx(e.to_string()))?;
        let window: TimeWindow = rec.get(w_col).unwrap_or("").parse().map_err(ctx)?;
        for &(i, sev) in &columns {
            let raw = rec.get(i).unwrap_or("").trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| ctx(format!("invalid rate {raw:?} for {window}")))?;
            out.entry(sev).or_default().insert(window, v);
        }
    }
    for (sev, rates) in &out {
        if rates.len() != TimeWindow::ALL.len() {
            return Err(ctx(format!("{sev}: expected one rate per window")));
        }
    }
    Ok(out)
}

pub fn timeofday(args: &TimeofdayArgs) -> Result<(), CliError> {
    let mut common = args.common.clone();
    common.dimension = Some(DimensionKind::Temporal);
    let explicit_severity = !common.severity.is_empty();
    let cfg = RunConfig::resolve(&common)?;
    let Some(rates_path) = &args.rates else {
        let loaded = load_all(&args.inputs, &cfg)?;
        let (docs, table) = benchmark_docs(&loaded, &cfg)?;
        emit(args.out.as_deref(), docs)?;
        return table.map_or(Ok(()), |t| exclusion_check(&t, &cfg, args.common.strict));
    };

    let mut digests = Digests::default();
    let shares_path = args
        .inputs
        .shares
        .as_deref()
        .ok_or_else(|| input_err("--shares is required"))?;
    digests.add("shares", shares_path)?;
    digests.add("rates", rates_path)?;
    let shares = exposure::load_time_shares(shares_path).map_err(input_err)?;
    let ads = shares
        .ads
        .as_ref()
        .ok_or_else(|| input_err("shares file needs an ads_miles_share column"))?;
    let ads_total: f64 = ads.values().sum();
    let human_total: f64 = shares.human.values().sum();
    if !(ads_total > 0.0 && human_total > 0.0) {
        return Err(input_err("shares must have positive totals"));
    }
    let rates = read_relative_rates(rates_path)?;
    let severities: Vec<Severity> = if explicit_severity {
        cfg.severities.clone()
    } else {
        rates.keys().copied().collect()
    };

    let ads_shares: Vec<f64> = TimeWindow::ALL
        .iter()
        .map(|w| ads[&SliceKey::Window(*w)] / ads_total)
        .collect();
    let windows: Vec<Value> = TimeWindow::ALL
        .iter()
        .zip(&ads_shares)
        .map(|(w, f_w)| {
            json!({
                "window": w.name(),
                "label": w.label(),
                "human_share": round_sig(shares.human[&SliceKey::Window(*w)] / human_total, RATE_DIGITS),
                "ads_share": round_sig(*f_w, RATE_DIGITS),
            })
        })
        .collect();
    let mut results = Vec::new();
    for sev in severities {
        let by_window = rates
            .get(&sev)
            .ok_or_else(|| input_err(format!("rates file has no {sev} column")))?;
        let rel: Vec<f64> = TimeWindow::ALL.iter().map(|w| by_window[w]).collect();
        let m = benchmark::multiplier_from_shares(&ads_shares, &rel).map_err(input_err)?;
        results
            .push(json!({ "severity": sev.name(), "multiplier": round_sig(m, MULTIPLIER_DIGITS) }));
    }
    let doc = json!({ "mode": "relative_rates", "windows": windows, "results": results });
    write_output(
        args.out.as_deref(),
        &report::to_pretty(&with_provenance(doc, &cfg, &digests)),
    )
}

pub fn buckets(args: &BucketsArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    let loaded = load_all(&args.inputs, &cfg)?;
    let mut docs = Vec::new();
    for &severity in &cfg.severities {
        let (table, events) = loaded.table_and_events(&cfg, severity)?;
        let stats = benchmark::stats_from_counts(
            &table,
            &events.raw_counts(table.len()),
            events.count_scale,
        );
        let rep = benchmark::quantile_buckets(&stats, args.buckets, cfg.bucket_mode)
            .map_err(input_err)?;
        let mut doc = json!({ "severity": severity.name() });
        if let (Value::Object(m), Value::Object(b)) = (&mut doc, report::buckets_json(&rep)) {
            m.extend(b);
        }
        docs.push(with_provenance(doc, &cfg, &loaded.digests));
    }
    emit(args.out.as_deref(), docs)
}

pub fn timeline(args: &TimelineArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    let loaded = load_all(&args.inputs, &cfg)?;
    let analysis = loaded.analysis(&cfg);
    let records = loaded.records()?;
    let mut docs = Vec::new();
    for &severity in &cfg.severities {
        let points = analysis
            .milestones(
                records,
                severity,
                &args.checkpoints,
                cfg.bootstrap().as_ref(),
            )
            .map_err(input_err)?;
        let doc =
            json!({ "severity": severity.name(), "points": report::milestones_json(&points) });
        docs.push(with_provenance(doc, &cfg, &loaded.digests));
    }
    emit(args.out.as_deref(), docs)
}

pub fn heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    if cfg.dimension != DimensionKind::Spatial {
        return Err(input_err("heatmap needs spatial slicing"));
    }
    let loaded = load_all(&args.inputs, &cfg)?;
    let severity = cfg.severities[0];
    let analysis = loaded.analysis(&cfg);
    let rows = analysis
        .heatmap(loaded.records()?, severity)
        .map_err(input_err)?;
    let file = File::create(&args.out)
        .map_err(|e| CliError::Output(format!("{}: {e}", args.out.display())))?;
    report::write_heatmap_csv(BufWriter::new(file), &rows)
        .map_err(|e| CliError::Output(e.to_string()))?;
    let meta = json!({ "severity": severity.name(), "cells": rows.len() });
    let mut meta_path = args.out.clone().into_os_string();
    meta_path.push(".meta.json");
    write_output(
        Some(Path::new(&meta_path)),
        &report::to_pretty(&with_provenance(meta, &cfg, &loaded.digests)),
    )
}

pub fn bootstrap(args: &BootstrapArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    let loaded = load_all(&args.inputs, &cfg)?;
    let statistic = match args.statistic {
        StatisticArg::Unadjusted => Statistic::Unadjusted,
        StatisticArg::Dynamic => Statistic::Dynamic,
        StatisticArg::Multiplier => Statistic::Multiplier,
    };
    let (scale, digits, unit) = match statistic {
        Statistic::Multiplier => (1.0, MULTIPLIER_DIGITS, "ratio"),
        _ => (1e6, RATE_DIGITS, "ipmm"),
    };
    let mut docs = Vec::new();
    for &severity in &cfg.severities {
        let (table, events) = loaded.table_and_events(&cfg, severity)?;
        let est = stats::poisson_bootstrap(&events, &table, statistic, &cfg.bootstrap)
            .map_err(input_err)?;
        let doc = json!({
            "severity": severity.name(),
            "statistic": statistic,
            "unit": unit,
            "point": round_sig(est.point * scale, digits),
            "lo": round_sig(est.lo * scale, digits),
            "hi": round_sig(est.hi * scale, digits),
            "replicates_used": est.replicates_used,
            "degenerate_replicates": est.degenerate,
            "quantile_rule": QUANTILE_RULE,
        });
        docs.push(with_provenance(doc, &cfg, &loaded.digests));
    }
    emit(args.out.as_deref(), docs)
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut spec = synth::load_spec(&args.spec).map_err(input_err)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = synth::generate(&spec).map_err(input_err)?;
    data.write_to(&args.out_dir)
        .map_err(|e| CliError::Output(e.to_string()))?;
    let mut digests = Digests::default();
    digests.add("spec", &args.spec)?;
    let oracle = synth::oracle_multiplier(&spec).ok();
    let doc = json!({
        "oracle_multiplier": oracle,
        "expected_crashes": spec.expected_crashes(),
        "n_slices": spec.n_slices(),
        "level": spec.level,
        "crashes": data.crashes.len(),
        "ads_records": data.ads.len(),
        "segments": data.segments.len(),
        "config_echo": serde_json::to_value(&spec).expect("spec serializes"),
        "input_digests": digests.value(),
    });
    write_output(
        Some(&args.out_dir.join("oracle.json")),
        &report::to_pretty(&doc),
    )
}

pub fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&args.common)?;
    let mut digests = Digests::default();
    let (crashes, drops) = load_crashes(&args.inputs, &mut digests)?;
    if let Some(out) = &args.out {
        let file =
            File::create(out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
        ingest::write_crashes(BufWriter::new(file), &crashes)
            .map_err(|e| CliError::Output(e.to_string()))?;
    }
    let mut excluded = None;
    if let Some(path) = &args.exposure_out {
        let (human, shares) = load_human(&args.inputs, &cfg, &mut digests)?;
        let loaded = Loaded {
            crashes: Vec::new(),
            ads: load_ads(&args.inputs, &cfg, shares, &mut digests)?,
            human,
            digests: Digests::default(),
        };
        let table = loaded
            .table(&loaded.analysis(&cfg), &cfg)
            .map_err(input_err)?;
        let file =
            File::create(path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        exposure::write_exposure_csv(BufWriter::new(file), &table)
            .map_err(|e| CliError::Output(e.to_string()))?;
        excluded = Some(json!({
            "excluded_ads_miles": round_sig(table.excluded_ads_miles(), RATE_DIGITS),
            "excluded_ads_fraction": round_sig(table.excluded_fraction(), RATE_DIGITS),
            "excluded_slices": table.excluded_slices(),
            "exclusion_warning": table.exclusion_warning(),
        }));
        exclusion_check(&table, &cfg, false)?;
    }
    let doc = json!({
        "input_rows": drops.input_rows,
        "kept": drops.kept,
        "missing_location": drops.missing_location,
        "not_surface_street": drops.not_surface_street,
        "not_passenger_vehicle": drops.not_passenger_vehicle,
        "exposure": excluded,
    });
    let doc = with_provenance(doc, &cfg, &digests);
    write_output(args.report.as_deref(), &report::to_pretty(&doc))?;
    if args.common.strict && doc["exposure"]["exclusion_warning"] == Value::Bool(true) {
        return Err(CliError::Strict(
            "excluded ADS mileage above threshold".into(),
        ));
    }
    Ok(())
}
