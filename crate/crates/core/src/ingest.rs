//! Crash and ADS-mileage ingestion.
//!
//! Three crash layouts are understood: the canonical CSV written by this crate,
//! a SWITRS-style adapter and an ADOT-style adapter. All of them end up as
//! [`CrashRecord`]s with precomputed [`SeverityFlags`]. Rows without a usable
//! location, or failing the surface-street / passenger-vehicle filters, are
//! dropped and tallied in a [`DropReport`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geoindex::{CellId, GeoPoint};

/// Default NHTSA-style underreporting share for injury crashes.
pub const DEFAULT_UNDERREPORTING_FACTOR: f64 = 0.32;

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];
const TIMESTAMP_OUT: &str = "%Y-%m-%dT%H:%M:%S%.f";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("invalid InjuryStatus code map: {0}")]
    CodeMap(String),
    #[error("underreporting factor must be in [0, 1), got {0}")]
    InvalidFactor(f64),
    #[error("csv write failed: {0}")]
    Write(#[from] csv::Error),
    #[error("{0}")]
    Mixed(String),
}

impl IngestError {
    fn parse(line: u64, message: impl Into<String>) -> Self {
        Self::Parse {
            line,
            message: message.into(),
        }
    }
}

/// Crash severity levels, from least to most restrictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    PoliceReported,
    AnyInjury,
    Airbag,
    SeriousPlus,
    Fatal,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::PoliceReported,
        Severity::AnyInjury,
        Severity::Airbag,
        Severity::SeriousPlus,
        Severity::Fatal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Severity::PoliceReported => "police_reported",
            Severity::AnyInjury => "any_injury",
            Severity::Airbag => "airbag",
            Severity::SeriousPlus => "serious_plus",
            Severity::Fatal => "fatal",
        }
    }

    pub fn matches(&self, flags: &SeverityFlags) -> bool {
        match self {
            Severity::PoliceReported => flags.police_reported,
            Severity::AnyInjury => flags.any_injury,
            Severity::Airbag => flags.airbag,
            Severity::SeriousPlus => flags.serious_plus,
            Severity::Fatal => flags.fatal,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Severity::ALL
            .into_iter()
            .find(|sev| sev.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown severity {s:?}"))
    }
}

/// Severity membership of one crash. Always monotone:
/// fatal ⇒ serious_plus ⇒ any_injury ⇒ police_reported, airbag ⇒ police_reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeverityFlags {
    police_reported: bool,
    any_injury: bool,
    airbag: bool,
    serious_plus: bool,
    fatal: bool,
}

impl SeverityFlags {
    /// Flags for a police-reported crash; lower levels are repaired upward
    /// from any higher level that is set.
    pub fn new(any_injury: bool, airbag: bool, serious_plus: bool, fatal: bool) -> Self {
        let serious_plus = serious_plus || fatal;
        let any_injury = any_injury || serious_plus;
        Self {
            police_reported: true,
            any_injury,
            airbag,
            serious_plus,
            fatal,
        }
    }

    pub fn police_reported(&self) -> bool {
        self.police_reported
    }
    pub fn any_injury(&self) -> bool {
        self.any_injury
    }
    pub fn airbag(&self) -> bool {
        self.airbag
    }
    pub fn serious_plus(&self) -> bool {
        self.serious_plus
    }
    pub fn fatal(&self) -> bool {
        self.fatal
    }

    pub fn is_monotone(&self) -> bool {
        (!self.fatal || self.serious_plus)
            && (!self.serious_plus || self.any_injury)
            && (!self.any_injury || self.police_reported)
            && (!self.airbag || self.police_reported)
    }
}

/// SWITRS `collision_severity` plus the four safety-equipment codes.
pub fn classify_switrs<S: AsRef<str>>(
    collision_severity: &str,
    safety_equip_codes: &[S],
) -> SeverityFlags {
    let sev = collision_severity.trim();
    let airbag = safety_equip_codes
        .iter()
        .any(|c| matches!(c.as_ref().trim(), "L" | "M"));
    SeverityFlags::new(
        matches!(sev, "K" | "A" | "B" | "C"),
        airbag,
        matches!(sev, "K" | "A"),
        sev == "K",
    )
}

/// Injury levels resolved from an ADOT `InjuryStatus` value via [`AdotCodeMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InjuryFlags {
    pub any_injury: bool,
    pub serious_plus: bool,
    pub fatal: bool,
}

pub const ADOT_AIRBAG_CODES: [i64; 7] = [2, 3, 4, 5, 102, 103, 105];

pub fn classify_adot(airbag_code: i64, injury: InjuryFlags) -> SeverityFlags {
    SeverityFlags::new(
        injury.any_injury,
        ADOT_AIRBAG_CODES.contains(&airbag_code),
        injury.serious_plus,
        injury.fatal,
    )
}

/// Which `InjuryStatus` values count toward each injury level. Loaded from
/// JSON such as `{"any_injury": [...], "serious_plus": [...], "fatal": [...]}`;
/// values may be strings or integers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdotCodeMap {
    any_injury: HashSet<String>,
    serious_plus: HashSet<String>,
    fatal: HashSet<String>,
}

impl AdotCodeMap {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| IngestError::CodeMap(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| IngestError::CodeMap("expected a JSON object".into()))?;
        let mut map = AdotCodeMap::default();
        for (key, codes) in obj {
            let target = match key.as_str() {
                "any_injury" => &mut map.any_injury,
                "serious_plus" => &mut map.serious_plus,
                "fatal" => &mut map.fatal,
                other => return Err(IngestError::CodeMap(format!("unknown key {other:?}"))),
            };
            let arr = codes
                .as_array()
                .ok_or_else(|| IngestError::CodeMap(format!("{key} must be an array")))?;
            for c in arr {
                let code = match c {
                    serde_json::Value::String(s) => s.trim().to_string(),
                    serde_json::Value::Number(n) => n.to_string(),
                    other => return Err(IngestError::CodeMap(format!("bad code {other}"))),
                };
                target.insert(code);
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn resolve(&self, injury_status: &str) -> InjuryFlags {
        let code = injury_status.trim();
        InjuryFlags {
            any_injury: self.any_injury.contains(code),
            serious_plus: self.serious_plus.contains(code),
            fatal: self.fatal.contains(code),
        }
    }
}

/// How the underreporting share turns a reported count into an adjusted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnderreportingFormula {
    /// `count / (1 - factor)`: reported crashes are `1 - factor` of the truth.
    #[default]
    Divide,
    /// `count * (1 + factor)`.
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Underreporting {
    pub factor: f64,
    pub formula: UnderreportingFormula,
}

impl Default for Underreporting {
    fn default() -> Self {
        Self {
            factor: DEFAULT_UNDERREPORTING_FACTOR,
            formula: UnderreportingFormula::Divide,
        }
    }
}

impl Underreporting {
    /// Count multiplier for `severity`; only any-injury counts are adjusted.
    pub fn multiplier(&self, severity: Severity) -> Result<f64, IngestError> {
        if !(0.0..1.0).contains(&self.factor) {
            return Err(IngestError::InvalidFactor(self.factor));
        }
        if severity != Severity::AnyInjury {
            return Ok(1.0);
        }
        Ok(match self.formula {
            UnderreportingFormula::Divide => 1.0 / (1.0 - self.factor),
            UnderreportingFormula::Multiply => 1.0 + self.factor,
        })
    }
}

pub fn apply_underreporting(
    count: f64,
    severity: Severity,
    adj: &Underreporting,
) -> Result<f64, IngestError> {
    let m = adj.multiplier(severity)?;
    Ok(if m == 1.0 { count } else { count * m })
}

/// Time-of-day windows; half-open, and the last one wraps past midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeWindow {
    EarlyMorning,
    MorningCommute,
    LateMorningEarlyAfternoon,
    LateAfternoon,
    EveningOvernight,
}

impl TimeWindow {
    pub const ALL: [TimeWindow; 5] = [
        TimeWindow::EarlyMorning,
        TimeWindow::MorningCommute,
        TimeWindow::LateMorningEarlyAfternoon,
        TimeWindow::LateAfternoon,
        TimeWindow::EveningOvernight,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TimeWindow::EarlyMorning => "Early Morning",
            TimeWindow::MorningCommute => "Morning Commute",
            TimeWindow::LateMorningEarlyAfternoon => "Late Morning & Early Afternoon",
            TimeWindow::LateAfternoon => "Late Afternoon",
            TimeWindow::EveningOvernight => "Evening & Overnight",
        }
    }

    /// Name with its clock range, e.g. `Early Morning 3AM - 6AM`.
    pub fn label(&self) -> &'static str {
        match self {
            TimeWindow::EarlyMorning => "Early Morning 3AM - 6AM",
            TimeWindow::MorningCommute => "Morning Commute 6AM - 9AM",
            TimeWindow::LateMorningEarlyAfternoon => "Late Morning & Early Afternoon 9AM - 3:30PM",
            TimeWindow::LateAfternoon => "Late Afternoon 3:30PM - 6:30PM",
            TimeWindow::EveningOvernight => "Evening & Overnight 6:30PM - 3AM",
        }
    }

    /// Start of the window in seconds after midnight.
    pub fn start_secs(&self) -> u32 {
        match self {
            TimeWindow::EarlyMorning => 3 * 3600,
            TimeWindow::MorningCommute => 6 * 3600,
            TimeWindow::LateMorningEarlyAfternoon => 9 * 3600,
            TimeWindow::LateAfternoon => 15 * 3600 + 1800,
            TimeWindow::EveningOvernight => 18 * 3600 + 1800,
        }
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TimeWindow {
    type Err = String;

    /// Accepts either the bare name or the full label, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        TimeWindow::ALL
            .into_iter()
            .find(|w| w.label().eq_ignore_ascii_case(s) || w.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown time window {s:?}"))
    }
}

pub fn time_window(t: NaiveTime) -> TimeWindow {
    let secs = t.num_seconds_from_midnight();
    TimeWindow::ALL
        .into_iter()
        .rev()
        .find(|w| secs >= w.start_secs())
        .unwrap_or(TimeWindow::EveningOvernight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CrashSource {
    Switrs,
    Adot,
    Canonical,
}

impl CrashSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CrashSource::Switrs => "SWITRS",
            CrashSource::Adot => "ADOT",
            CrashSource::Canonical => "CANONICAL",
        }
    }
}

impl FromStr for CrashSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SWITRS" => Ok(CrashSource::Switrs),
            "ADOT" => Ok(CrashSource::Adot),
            "CANONICAL" | "" => Ok(CrashSource::Canonical),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// One countable crashed-vehicle event.
#[derive(Debug, Clone, PartialEq)]
pub struct CrashRecord {
    pub id: String,
    pub location: Option<GeoPoint>,
    pub occurred_at: Option<NaiveDateTime>,
    pub source: CrashSource,
    pub severity: SeverityFlags,
    pub is_surface_street: bool,
    pub is_passenger_vehicle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CrashFormat {
    Canonical,
    Switrs,
    Adot(AdotCodeMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropReport {
    pub input_rows: usize,
    pub kept: usize,
    pub missing_location: usize,
    pub not_surface_street: usize,
    pub not_passenger_vehicle: usize,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.missing_location + self.not_surface_street + self.not_passenger_vehicle
    }

    pub fn reconciles(&self) -> bool {
        self.kept + self.dropped() == self.input_rows
    }
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, String> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("invalid timestamp {s:?}"))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_OUT).to_string()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "t" | "yes" => Ok(true),
        "false" | "0" | "f" | "no" => Ok(false),
        other => Err(format!("invalid boolean {other:?}")),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("invalid {what} {s:?}"))
}

/// Header-indexed view over one CSV row.
struct Row<'a> {
    record: &'a csv::StringRecord,
    columns: &'a HashMap<String, usize>,
    line: u64,
}

impl Row<'_> {
    fn get(&self, name: &str) -> Option<&str> {
        self.columns
            .get(name)
            .and_then(|&i| self.record.get(i))
            .map(str::trim)
    }

    fn required(&self, name: &str) -> Result<&str, IngestError> {
        self.get(name)
            .ok_or_else(|| IngestError::parse(self.line, format!("missing field {name:?}")))
    }

    fn err(&self, message: impl Into<String>) -> IngestError {
        IngestError::parse(self.line, message)
    }

    fn location(&self) -> Result<Option<GeoPoint>, IngestError> {
        let (lat, lng) = (self.get("lat").unwrap_or(""), self.get("lng").unwrap_or(""));
        if lat.is_empty() || lng.is_empty() {
            return Ok(None);
        }
        let lat = parse_f64(lat, "lat").map_err(|m| self.err(m))?;
        let lng = parse_f64(lng, "lng").map_err(|m| self.err(m))?;
        GeoPoint::new(lat, lng)
            .map(Some)
            .map_err(|e| self.err(e.to_string()))
    }

    fn opt_bool(&self, name: &str, default: bool) -> Result<bool, IngestError> {
        match self.get(name) {
            None | Some("") => Ok(default),
            Some(v) => parse_bool(v).map_err(|m| self.err(format!("{name}: {m}"))),
        }
    }

    fn bool(&self, name: &str) -> Result<bool, IngestError> {
        parse_bool(self.required(name)?).map_err(|m| self.err(format!("{name}: {m}")))
    }

    fn timestamp(&self, name: &str) -> Result<Option<NaiveDateTime>, IngestError> {
        match self.get(name) {
            None | Some("") => Ok(None),
            Some(v) => parse_timestamp(v).map(Some).map_err(|m| self.err(m)),
        }
    }
}

fn header_index(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
        .collect()
}

fn require_columns(columns: &HashMap<String, usize>, names: &[&str]) -> Result<(), IngestError> {
    match names.iter().find(|n| !columns.contains_key(**n)) {
        Some(n) => Err(IngestError::MissingColumn(n.to_string())),
        None => Ok(()),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader)
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IngestError::parse(line, e.to_string())
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const CANONICAL_COLUMNS: [&str; 11] = [
    "crash_id",
    "lat",
    "lng",
    "occurred_at",
    "source",
    "is_surface_street",
    "is_passenger_vehicle",
    "any_injury",
    "airbag",
    "serious_plus",
    "fatal",
];
const SWITRS_EQUIP: [&str; 4] = [
    "victim_safety_equip_1",
    "victim_safety_equip_2",
    "party_safety_equip_1",
    "party_safety_equip_2",
];

fn parse_crash_row(row: &Row<'_>, format: &CrashFormat) -> Result<CrashRecord, IngestError> {
    let (source, severity) = match format {
        CrashFormat::Canonical => {
            let source = row
                .get("source")
                .unwrap_or("")
                .parse()
                .map_err(|m: String| row.err(m))?;
            let flags = SeverityFlags::new(
                row.bool("any_injury")?,
                row.bool("airbag")?,
                row.bool("serious_plus")?,
                row.bool("fatal")?,
            );
            (source, flags)
        }
        CrashFormat::Switrs => {
            let equip: Vec<&str> = SWITRS_EQUIP.iter().filter_map(|c| row.get(c)).collect();
            (
                CrashSource::Switrs,
                classify_switrs(row.required("collision_severity")?, &equip),
            )
        }
        CrashFormat::Adot(map) => {
            let raw = row.required("Airbag")?;
            let airbag = if raw.is_empty() {
                0
            } else {
                raw.parse::<i64>()
                    .map_err(|_| row.err(format!("invalid Airbag code {raw:?}")))?
            };
            let injury = map.resolve(row.required("InjuryStatus")?);
            (CrashSource::Adot, classify_adot(airbag, injury))
        }
    };
    let id = match row.get("crash_id") {
        Some(id) if !id.is_empty() => id.to_string(),
        _ if matches!(format, CrashFormat::Canonical) => return Err(row.err("empty crash_id")),
        _ => format!("{}-{}", source.as_str().to_ascii_lowercase(), row.line),
    };
    Ok(CrashRecord {
        id,
        location: row.location()?,
        occurred_at: row.timestamp("occurred_at")?,
        source,
        severity,
        is_surface_street: row.opt_bool("is_surface_street", true)?,
        is_passenger_vehicle: row.opt_bool("is_passenger_vehicle", true)?,
    })
}

/// Parses crash rows from `reader`; see [`load_crashes`].
pub fn read_crashes<R: Read>(
    reader: R,
    format: &CrashFormat,
) -> Result<(Vec<CrashRecord>, DropReport), IngestError> {
    let mut rdr = csv_reader(reader);
    let columns = header_index(rdr.headers().map_err(csv_error)?);
    match format {
        CrashFormat::Canonical => require_columns(&columns, &CANONICAL_COLUMNS)?,
        CrashFormat::Switrs => require_columns(&columns, &["collision_severity", "lat", "lng"])?,
        CrashFormat::Adot(_) => {
            require_columns(&columns, &["Airbag", "InjuryStatus", "lat", "lng"])?
        }
    }
    let mut report = DropReport::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(csv_error)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            record: &record,
            columns: &columns,
            line,
        };
        let crash = parse_crash_row(&row, format)?;
        if !seen.insert(crash.id.clone()) {
            return Err(row.err(format!("duplicate crash_id {:?}", crash.id)));
        }
        report.input_rows += 1;
        if crash.location.is_none() {
            report.missing_location += 1;
        } else if !crash.is_surface_street {
            report.not_surface_street += 1;
        } else if !crash.is_passenger_vehicle {
            report.not_passenger_vehicle += 1;
        } else {
            report.kept += 1;
            out.push(crash);
        }
    }
    Ok((out, report))
}

/// Loads a crash file. Rows missing a location are dropped, as are rows that
/// are not surface-street passenger-vehicle crashes; each reason is counted.
pub fn load_crashes(
    path: &Path,
    format: &CrashFormat,
) -> Result<(Vec<CrashRecord>, DropReport), IngestError> {
    read_crashes(open(path)?, format)
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Writes records in the canonical crash CSV layout.
pub fn write_crashes<W: Write>(writer: W, records: &[CrashRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CANONICAL_COLUMNS)?;
    for r in records {
        let (lat, lng) = r
            .location
            .map(|p| (p.lat().to_string(), p.lng().to_string()))
            .unwrap_or_default();
        let ts = r
            .occurred_at
            .as_ref()
            .map(format_timestamp)
            .unwrap_or_default();
        w.write_record([
            r.id.as_str(),
            &lat,
            &lng,
            &ts,
            r.source.as_str(),
            fmt_bool(r.is_surface_street),
            fmt_bool(r.is_passenger_vehicle),
            fmt_bool(r.severity.any_injury()),
            fmt_bool(r.severity.airbag()),
            fmt_bool(r.severity.serious_plus()),
            fmt_bool(r.severity.fatal()),
        ])?;
    }
    w.flush().map_err(|e| IngestError::Write(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdsLocation {
    Point(GeoPoint),
    Cell(CellId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdsMileageRecord {
    pub location: AdsLocation,
    pub miles: f64,
    pub recorded_at: NaiveDateTime,
    pub fleet_tag: Option<String>,
}

/// Reads ADS mileage; the layout (`lat,lng` or pre-binned `cell_id`) is
/// detected from the header.
pub fn read_ads_mileage<R: Read>(reader: R) -> Result<Vec<AdsMileageRecord>, IngestError> {
    let mut rdr = csv_reader(reader);
    let columns = header_index(rdr.headers().map_err(csv_error)?);
    let prebinned = columns.contains_key("cell_id");
    if prebinned {
        require_columns(&columns, &["cell_id", "miles", "recorded_at"])?;
    } else {
        require_columns(&columns, &["lat", "lng", "miles", "recorded_at"])?;
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(csv_error)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            record: &record,
            columns: &columns,
            line,
        };
        let location = if prebinned {
            AdsLocation::Cell(
                row.required("cell_id")?
                    .parse()
                    .map_err(|e: crate::geoindex::GeoError| row.err(e.to_string()))?,
            )
        } else {
            AdsLocation::Point(row.location()?.ok_or_else(|| row.err("missing lat/lng"))?)
        };
        let miles = parse_f64(row.required("miles")?, "miles").map_err(|m| row.err(m))?;
        if !(miles >= 0.0 && miles.is_finite()) {
            return Err(row.err(format!("miles must be finite and >= 0, got {miles}")));
        }
        let recorded_at = row
            .timestamp("recorded_at")?
            .ok_or_else(|| row.err("missing recorded_at"))?;
        let fleet_tag = row
            .get("fleet_tag")
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(AdsMileageRecord {
            location,
            miles,
            recorded_at,
            fleet_tag,
        });
    }
    Ok(out)
}

pub fn load_ads_mileage(path: &Path) -> Result<Vec<AdsMileageRecord>, IngestError> {
    read_ads_mileage(open(path)?)
}

/// Writes ADS mileage; all records must share one location layout.
pub fn write_ads_mileage<W: Write>(
    writer: W,
    records: &[AdsMileageRecord],
) -> Result<(), IngestError> {
    let prebinned = matches!(
        records.first().map(|r| r.location),
        Some(AdsLocation::Cell(_))
    );
    let mut w = csv::Writer::from_writer(writer);
    if prebinned {
        w.write_record(["cell_id", "miles", "recorded_at", "fleet_tag"])?;
    } else {
        w.write_record(["lat", "lng", "miles", "recorded_at", "fleet_tag"])?;
    }
    for r in records {
        let tag = r.fleet_tag.as_deref().unwrap_or("");
        let ts = format_timestamp(&r.recorded_at);
        let miles = r.miles.to_string();
        match (r.location, prebinned) {
            (AdsLocation::Cell(c), true) => {
                w.write_record([c.token().as_str(), &miles, &ts, tag])?
            }
            (AdsLocation::Point(p), false) => w.write_record([
                p.lat().to_string().as_str(),
                &p.lng().to_string(),
                &miles,
                &ts,
                tag,
            ])?,
            _ => {
                return Err(IngestError::Mixed(
                    "ADS records mix cell ids and coordinates".into(),
                ))
            }
        }
    }
    w.flush().map_err(|e| IngestError::Write(e.into()))?;
    Ok(())
}

/// Distinct fleet tags, sorted.
pub fn fleet_tags(records: &[AdsMileageRecord]) -> BTreeSet<String> {
    records.iter().filter_map(|r| r.fleet_tag.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveTime;

    fn hm(h: u32, m: u32) -> NaiveTime {
        NaiveTime::from_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn switrs_golden() {
        let k = classify_switrs::<&str>("K", &[]);
        assert!(k.fatal() && k.serious_plus() && k.any_injury() && k.police_reported());
        assert!(!k.airbag());

        let b = classify_switrs("B", &["L"]);
        assert!(b.any_injury() && b.airbag());
        assert!(!b.serious_plus() && !b.fatal());

        let n = classify_switrs::<&str>("N", &[]);
        assert_eq!(n, SeverityFlags::new(false, false, false, false));
        assert!(n.police_reported());

        for (code, any, serious, fatal) in [
            ("K", true, true, true),
            ("A", true, true, false),
            ("B", true, false, false),
            ("C", true, false, false),
            ("O", false, false, false),
        ] {
            let f = classify_switrs::<&str>(code, &[]);
            assert_eq!(
                (f.any_injury(), f.serious_plus(), f.fatal()),
                (any, serious, fatal),
                "{code}"
            );
        }
        for (equip, airbag) in [
            ("L", true),
            ("M", true),
            ("N", false),
            ("", false),
            ("l", false),
        ] {
            assert_eq!(
                classify_switrs("O", &["", equip, "", ""]).airbag(),
                airbag,
                "{equip}"
            );
        }
    }

    #[test]
    fn adot_golden() {
        for code in -1..=200 {
            let f = classify_adot(code, InjuryFlags::default());
            assert_eq!(
                f.airbag(),
                [2, 3, 4, 5, 102, 103, 105].contains(&code),
                "{code}"
            );
        }
        let repaired = classify_adot(
            1,
            InjuryFlags {
                any_injury: false,
                serious_plus: false,
                fatal: true,
            },
        );
        assert!(repaired.fatal() && repaired.serious_plus() && repaired.any_injury());
        assert!(!repaired.airbag());
    }

    #[test]
    fn code_map_resolution() {
        let map = AdotCodeMap::from_json(
            r#"{"any_injury": [2, 3, "4"], "serious_plus": [4], "fatal": ["5"]}"#,
        )
        .unwrap();
        assert!(map.resolve("3").any_injury);
        assert!(map.resolve(" 4 ").serious_plus);
        assert!(map.resolve("5").fatal);
        assert_eq!(map.resolve("1"), InjuryFlags::default());
        assert!(AdotCodeMap::from_json(r#"{"minor": [1]}"#).is_err());
        assert!(AdotCodeMap::from_json("[]").is_err());
    }

    #[test]
    fn time_window_boundaries() {
        assert_eq!(time_window(hm(3, 0)), TimeWindow::EarlyMorning);
        assert_eq!(
            time_window(hm(15, 29)),
            TimeWindow::LateMorningEarlyAfternoon
        );
        assert_eq!(time_window(hm(15, 30)), TimeWindow::LateAfternoon);
        assert_eq!(time_window(hm(2, 59)), TimeWindow::EveningOvernight);
        assert_eq!(time_window(hm(0, 0)), TimeWindow::EveningOvernight);
        assert_eq!(time_window(hm(18, 29)), TimeWindow::LateAfternoon);
        assert_eq!(time_window(hm(18, 30)), TimeWindow::EveningOvernight);
        assert_eq!(time_window(hm(6, 0)), TimeWindow::MorningCommute);
        assert_eq!(time_window(hm(9, 0)), TimeWindow::LateMorningEarlyAfternoon);
        assert_eq!(
            time_window(NaiveTime::from_hms_opt(2, 59, 59).unwrap()),
            TimeWindow::EveningOvernight
        );
    }

    #[test]
    fn windows_partition_the_day() {
        let mut counts = [0usize; 5];
        for minute in 0..1440 {
            let w = time_window(hm(minute / 60, minute % 60));
            counts[TimeWindow::ALL.iter().position(|x| *x == w).unwrap()] += 1;
        }
        assert_eq!(counts, [180, 180, 390, 180, 510]);
    }

    #[test]
    fn window_names_parse() {
        for w in TimeWindow::ALL {
            assert_eq!(w.label().parse::<TimeWindow>().unwrap(), w);
            assert_eq!(w.name().parse::<TimeWindow>().unwrap(), w);
        }
        assert!("Lunch".parse::<TimeWindow>().is_err());
    }

    #[test]
    fn underreporting() {
        let adj = Underreporting::default();
        assert!(
            (apply_underreporting(68.0, Severity::AnyInjury, &adj).unwrap() - 100.0).abs() < 1e-12
        );
        assert_eq!(
            apply_underreporting(68.0, Severity::PoliceReported, &adj).unwrap(),
            68.0
        );
        assert_eq!(
            apply_underreporting(0.0, Severity::AnyInjury, &adj).unwrap(),
            0.0
        );
        let mult = Underreporting {
            factor: 0.32,
            formula: UnderreportingFormula::Multiply,
        };
        assert!(
            (apply_underreporting(100.0, Severity::AnyInjury, &mult).unwrap() - 132.0).abs()
                < 1e-12
        );
        let bad = Underreporting {
            factor: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            apply_underreporting(1.0, Severity::AnyInjury, &bad),
            Err(IngestError::InvalidFactor(_))
        ));
    }

    const HEADER: &str =
        "crash_id,lat,lng,occurred_at,source,is_surface_street,is_passenger_vehicle,any_injury,airbag,serious_plus,fatal\n";

    #[test]
    fn canonical_drop_reconciliation() {
        let mut text = HEADER.to_string();
        for i in 0..10 {
            let loc = if i < 2 {
                ",".to_string()
            } else {
                format!("37.7{i},-122.4{i}")
            };
            text.push_str(&format!(
                "c{i},{loc},2022-03-01T08:15:00,SWITRS,true,true,false,false,false,false\n"
            ));
        }
        let (records, report) = read_crashes(text.as_bytes(), &CrashFormat::Canonical).unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(report.missing_location, 2);
        assert_eq!(report.input_rows, 10);
        assert!(report.reconciles());
    }

    #[test]
    fn canonical_filters_counted_separately() {
        let text = format!(
            "{HEADER}a,37,-122,,ADOT,false,true,false,false,false,false\n\
             b,37,-122,,ADOT,true,false,false,false,false,false\n\
             c,37,-122,,ADOT,true,true,true,false,false,false\n"
        );
        let (records, report) = read_crashes(text.as_bytes(), &CrashFormat::Canonical).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(report.not_surface_street, 1);
        assert_eq!(report.not_passenger_vehicle, 1);
        assert!(report.reconciles());
        assert!(records[0].occurred_at.is_none());
    }

    #[test]
    fn empty_file_with_header() {
        let (records, report) = read_crashes(HEADER.as_bytes(), &CrashFormat::Canonical).unwrap();
        assert!(records.is_empty());
        assert_eq!(report, DropReport::default());
    }

    #[test]
    fn range_violation_names_line() {
        let text = format!("{HEADER}a,37,-122,,SWITRS,true,true,false,false,false,false\nb,91,0,,SWITRS,true,true,false,false,false,false\n");
        match read_crashes(text.as_bytes(), &CrashFormat::Canonical) {
            Err(IngestError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("91"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{HEADER}a,37,-122,,SWITRS,true,true,false,false,false,false\na,37,-122,,SWITRS,true,true,false,false,false,false\n");
        assert!(matches!(
            read_crashes(text.as_bytes(), &CrashFormat::Canonical),
            Err(IngestError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn missing_column_is_an_error() {
        assert!(matches!(
            read_crashes("crash_id,lat\n".as_bytes(), &CrashFormat::Canonical),
            Err(IngestError::MissingColumn(_))
        ));
    }

    #[test]
    fn switrs_adapter() {
        let text = "collision_severity,victim_safety_equip_1,victim_safety_equip_2,party_safety_equip_1,party_safety_equip_2,lat,lng,extra\n\
                    K,,,,,37.7,-122.4,x\n\
                    C,A,B,M,,37.7,-122.4,y\n\
                    O,,,,,,,z\n";
        let (records, report) = read_crashes(text.as_bytes(), &CrashFormat::Switrs).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(report.missing_location, 1);
        assert!(records[0].severity.fatal());
        assert!(records[1].severity.airbag() && records[1].severity.any_injury());
        assert_eq!(records[0].id, "switrs-2");
        assert_eq!(records[0].source, CrashSource::Switrs);
    }

    #[test]
    fn adot_adapter() {
        let map = AdotCodeMap::from_json(
            r#"{"any_injury": [2,3,4,5], "serious_plus": [4,5], "fatal": [5]}"#,
        )
        .unwrap();
        let text = "Airbag,InjuryStatus,lat,lng\n103,1,33.4,-111.9\n1,5,33.4,-111.9\n";
        let (records, _) = read_crashes(text.as_bytes(), &CrashFormat::Adot(map)).unwrap();
        assert!(records[0].severity.airbag() && !records[0].severity.any_injury());
        assert!(records[1].severity.fatal() && !records[1].severity.airbag());
    }

    #[test]
    fn ads_mileage_layouts() {
        let points = "lat,lng,miles,recorded_at,fleet_tag\n37.7,-122.4,1.5,2023-01-01T02:00:00,ipace\n37.7,-122.4,2.5,2023-01-01 03:00:00,\n";
        let recs = read_ads_mileage(points.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].fleet_tag.as_deref(), Some("ipace"));
        assert_eq!(recs[1].fleet_tag, None);

        let binned =
            "cell_id,miles,recorded_at,fleet_tag\nf4-l13-0000001,3,2023-01-01T00:00:00,a\n";
        let recs = read_ads_mileage(binned.as_bytes()).unwrap();
        assert!(matches!(recs[0].location, AdsLocation::Cell(_)));

        let negative = "lat,lng,miles,recorded_at\n37.7,-122.4,-1,2023-01-01T00:00:00\n";
        assert!(matches!(
            read_ads_mileage(negative.as_bytes()),
            Err(IngestError::Parse { line: 2, .. })
        ));
    }
}
