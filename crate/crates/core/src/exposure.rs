//! Per-slice exposure: human VMT from road segments (or time-of-day shares),
//! ADS mileage binned onto the same slices, and the join between them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geoindex::{self, CellId, GeoError, GeoPoint, Polyline, METERS_PER_MILE};
use crate::ingest::{time_window, AdsLocation, AdsMileageRecord, TimeWindow};

/// Default share of ADS miles that may be excluded before the table is flagged.
pub const DEFAULT_EXCLUSION_WARN_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ExposureError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("calibration needs positive totals (relative sum {relative}, target {target})")]
    Calibration { relative: f64, target: f64 },
    #[error("pre-binned cell {cell} is level {found}, expected level {expected}")]
    LevelMismatch {
        cell: CellId,
        found: u8,
        expected: u8,
    },
    #[error("slices mix spatial and temporal keys")]
    DimensionMismatch,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> ExposureError {
    ExposureError::Parse {
        context: context.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub geometry: Polyline,
    /// Vehicles per day.
    pub aadt: f64,
    pub functional_class: String,
    pub is_surface_street: bool,
}

impl RoadSegment {
    pub fn new(
        geometry: Polyline,
        aadt: f64,
        functional_class: impl Into<String>,
        is_surface_street: bool,
    ) -> Result<Self, ExposureError> {
        if !(aadt.is_finite() && aadt >= 0.0) {
            return Err(parse_err(
                "segment",
                format!("aadt must be finite and >= 0, got {aadt}"),
            ));
        }
        Ok(Self {
            geometry,
            aadt,
            functional_class: functional_class.into(),
            is_surface_street,
        })
    }
}

/// Which axis the slices partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dimension {
    Spatial { level: u8 },
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SliceKey {
    Cell(CellId),
    Window(TimeWindow),
}

impl SliceKey {
    fn is_spatial(&self) -> bool {
        matches!(self, SliceKey::Cell(_))
    }

    pub fn cell(&self) -> Option<CellId> {
        match self {
            SliceKey::Cell(c) => Some(*c),
            SliceKey::Window(_) => None,
        }
    }
}

impl fmt::Display for SliceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceKey::Cell(c) => write!(f, "{c}"),
            SliceKey::Window(w) => write!(f, "{w}"),
        }
    }
}

impl Serialize for SliceKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for SliceKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(c) = s.parse::<CellId>() {
            return Ok(SliceKey::Cell(c));
        }
        s.parse::<TimeWindow>().map(SliceKey::Window)
    }
}

/// Relative VMT per cell: `Σ length_miles · aadt · fraction` over segments.
pub fn relative_vmt(
    segments: &[RoadSegment],
    level: u8,
    step_m: f64,
) -> Result<BTreeMap<CellId, f64>, ExposureError> {
    let mut out = BTreeMap::new();
    for seg in segments {
        let miles = seg.geometry.length_m() / METERS_PER_MILE;
        if miles <= 0.0 {
            continue;
        }
        let volume = miles * seg.aadt;
        for (cell, frac) in geoindex::allocate_polyline(&seg.geometry, level, step_m)?.iter() {
            *out.entry(*cell).or_insert(0.0) += volume * frac;
        }
    }
    Ok(out)
}

/// Rescales `rel` so it sums to `target_total`.
pub fn calibrate<K: Ord + Clone>(
    rel: &BTreeMap<K, f64>,
    target_total: f64,
) -> Result<BTreeMap<K, f64>, ExposureError> {
    let sum: f64 = rel.values().sum();
    if !(sum > 0.0 && target_total > 0.0 && sum.is_finite() && target_total.is_finite())
        || rel.values().any(|v| *v < 0.0)
    {
        return Err(ExposureError::Calibration {
            relative: sum,
            target: target_total,
        });
    }
    let k = target_total / sum;
    Ok(rel.iter().map(|(key, v)| (key.clone(), v * k)).collect())
}

pub fn cells_to_slices(map: &BTreeMap<CellId, f64>) -> BTreeMap<SliceKey, f64> {
    map.iter().map(|(c, v)| (SliceKey::Cell(*c), *v)).collect()
}

/// Slice key for one ADS record under `dimension`.
pub fn ads_slice(
    record: &AdsMileageRecord,
    dimension: Dimension,
) -> Result<SliceKey, ExposureError> {
    match dimension {
        Dimension::Temporal => Ok(SliceKey::Window(time_window(record.recorded_at.time()))),
        Dimension::Spatial { level } => match record.location {
            AdsLocation::Point(p) => Ok(SliceKey::Cell(geoindex::cell_from_point(p, level)?)),
            AdsLocation::Cell(c) if c.level() == level => Ok(SliceKey::Cell(c)),
            AdsLocation::Cell(c) => Err(ExposureError::LevelMismatch {
                cell: c,
                found: c.level(),
                expected: level,
            }),
        },
    }
}

/// Sums ADS miles per slice.
pub fn bin_ads_miles(
    records: &[AdsMileageRecord],
    dimension: Dimension,
) -> Result<BTreeMap<SliceKey, f64>, ExposureError> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(ads_slice(r, dimension)?).or_insert(0.0) += r.miles;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExposureRow {
    pub key: SliceKey,
    pub human_vmt: f64,
    pub ads_miles: f64,
}

/// Joined exposure. Every row has `human_vmt > 0`; ADS miles in slices
/// without human VMT are held out in `excluded_ads_miles`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTable {
    rows: Vec<ExposureRow>,
    total_human: f64,
    total_ads: f64,
    excluded_ads_miles: f64,
    excluded_slices: usize,
    warn_threshold: f64,
}

fn check_single_dimension<'a>(
    keys: impl Iterator<Item = &'a SliceKey>,
) -> Result<(), ExposureError> {
    let mut kind = None;
    for k in keys {
        match kind {
            None => kind = Some(k.is_spatial()),
            Some(s) if s != k.is_spatial() => return Err(ExposureError::DimensionMismatch),
            _ => {}
        }
    }
    Ok(())
}

/// Joins human VMT and ADS miles on their slice keys.
pub fn join_exposure(
    human: &BTreeMap<SliceKey, f64>,
    ads: &BTreeMap<SliceKey, f64>,
) -> Result<ExposureTable, ExposureError> {
    check_single_dimension(human.keys().chain(ads.keys()))?;
    if let Some((k, v)) = human
        .iter()
        .chain(ads.iter())
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(parse_err(
            k.to_string(),
            format!("mileage must be finite and >= 0, got {v}"),
        ));
    }
    let rows: Vec<ExposureRow> = human
        .iter()
        .filter(|(_, m)| **m > 0.0)
        .map(|(k, m)| ExposureRow {
            key: *k,
            human_vmt: *m,
            ads_miles: ads.get(k).copied().unwrap_or(0.0),
        })
        .collect();
    let (mut excluded_ads_miles, mut excluded_slices) = (0.0, 0);
    for (k, m) in ads {
        if *m > 0.0 && human.get(k).copied().unwrap_or(0.0) <= 0.0 {
            excluded_ads_miles += m;
            excluded_slices += 1;
        }
    }
    Ok(ExposureTable {
        total_human: rows.iter().map(|r| r.human_vmt).sum(),
        total_ads: rows.iter().map(|r| r.ads_miles).sum(),
        rows,
        excluded_ads_miles,
        excluded_slices,
        warn_threshold: DEFAULT_EXCLUSION_WARN_THRESHOLD,
    })
}

impl ExposureTable {
    pub fn with_warn_threshold(mut self, threshold: f64) -> Self {
        self.warn_threshold = threshold;
        self
    }

    /// Same human side, new ADS miles.
    pub fn with_ads(&self, ads: &BTreeMap<SliceKey, f64>) -> Result<ExposureTable, ExposureError> {
        Ok(join_exposure(&self.human_map(), ads)?.with_warn_threshold(self.warn_threshold))
    }

    pub fn rows(&self) -> &[ExposureRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn index_of(&self, key: &SliceKey) -> Option<usize> {
        self.rows.binary_search_by(|r| r.key.cmp(key)).ok()
    }

    pub fn dimension_is_spatial(&self) -> Option<bool> {
        self.rows.first().map(|r| r.key.is_spatial())
    }

    /// `M^(H)`.
    pub fn total_human(&self) -> f64 {
        self.total_human
    }

    /// `M^(W)` over retained slices.
    pub fn total_ads(&self) -> f64 {
        self.total_ads
    }

    pub fn excluded_ads_miles(&self) -> f64 {
        self.excluded_ads_miles
    }

    pub fn excluded_slices(&self) -> usize {
        self.excluded_slices
    }

    pub fn excluded_fraction(&self) -> f64 {
        let all = self.excluded_ads_miles + self.total_ads;
        if all > 0.0 {
            self.excluded_ads_miles / all
        } else {
            0.0
        }
    }

    pub fn warn_threshold(&self) -> f64 {
        self.warn_threshold
    }

    pub fn exclusion_warning(&self) -> bool {
        self.excluded_fraction() > self.warn_threshold
    }

    pub fn f_h(&self, i: usize) -> f64 {
        share(self.rows[i].human_vmt, self.total_human)
    }

    pub fn f_w(&self, i: usize) -> f64 {
        share(self.rows[i].ads_miles, self.total_ads)
    }

    pub fn human_map(&self) -> BTreeMap<SliceKey, f64> {
        self.rows.iter().map(|r| (r.key, r.human_vmt)).collect()
    }

    pub fn ads_map(&self) -> BTreeMap<SliceKey, f64> {
        self.rows.iter().map(|r| (r.key, r.ads_miles)).collect()
    }
}

fn share(v: f64, total: f64) -> f64 {
    if total > 0.0 {
        v / total
    } else {
        0.0
    }
}

/// Writes `slice,human_vmt,ads_miles,f_h,f_w`.
pub fn write_exposure_csv<W: Write>(writer: W, table: &ExposureTable) -> Result<(), ExposureError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["slice", "human_vmt", "ads_miles", "f_h", "f_w"])?;
    for (i, r) in table.rows.iter().enumerate() {
        w.write_record([
            r.key.to_string(),
            r.human_vmt.to_string(),
            r.ads_miles.to_string(),
            table.f_h(i).to_string(),
            table.f_w(i).to_string(),
        ])?;
    }
    w.flush().map_err(|e| ExposureError::Csv(e.into()))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<String, ExposureError> {
    std::fs::read_to_string(path).map_err(|source| ExposureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn coords_to_polyline(coords: &Value, ctx: &str) -> Result<Polyline, ExposureError> {
    let arr = coords
        .as_array()
        .ok_or_else(|| parse_err(ctx, "coordinates must be an array"))?;
    let mut points = Vec::with_capacity(arr.len());
    for pos in arr {
        let xy = pos.as_array().filter(|a| a.len() >= 2);
        let (lng, lat) = match xy.map(|a| (a[0].as_f64(), a[1].as_f64())) {
            Some((Some(x), Some(y))) => (x, y),
            _ => return Err(parse_err(ctx, "position must be [lng, lat]")),
        };
        points.push(GeoPoint::new(lat, lng).map_err(|e| parse_err(ctx, e.to_string()))?);
    }
    Polyline::new(points).map_err(|e| parse_err(ctx, e.to_string()))
}

/// Parses a GeoJSON FeatureCollection of LineString / MultiLineString road
/// segments. Each MultiLineString part becomes its own segment.
pub fn parse_segments_geojson(text: &str) -> Result<Vec<RoadSegment>, ExposureError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| parse_err("geojson", e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| {
            parse_err(
                "geojson",
                "expected a FeatureCollection with a features array",
            )
        })?;
    let mut out = Vec::new();
    for (idx, f) in features.iter().enumerate() {
        let ctx = format!("feature {idx}");
        let props = f.get("properties").cloned().unwrap_or(Value::Null);
        let aadt = props
            .get("aadt")
            .and_then(Value::as_f64)
            .ok_or_else(|| parse_err(&ctx, "missing numeric property aadt"))?;
        let class = props
            .get("functional_class")
            .and_then(Value::as_str)
            .unwrap_or("");
        let surface = match props.get("is_surface_street") {
            None | Some(Value::Null) => true,
            Some(v) => v
                .as_bool()
                .ok_or_else(|| parse_err(&ctx, "is_surface_street must be a boolean"))?,
        };
        let geom = f
            .get("geometry")
            .ok_or_else(|| parse_err(&ctx, "missing geometry"))?;
        let coords = geom.get("coordinates").unwrap_or(&Value::Null);
        let lines = match geom.get("type").and_then(Value::as_str) {
            Some("LineString") => vec![coords_to_polyline(coords, &ctx)?],
            Some("MultiLineString") => coords
                .as_array()
                .ok_or_else(|| parse_err(&ctx, "coordinates must be an array"))?
                .iter()
                .map(|part| coords_to_polyline(part, &ctx))
                .collect::<Result<_, _>>()?,
            other => {
                return Err(parse_err(
                    &ctx,
                    format!("unsupported geometry type {other:?}"),
                ))
            }
        };
        for line in lines {
            out.push(
                RoadSegment::new(line, aadt, class, surface)
                    .map_err(|e| parse_err(&ctx, e.to_string()))?,
            );
        }
    }
    Ok(out)
}

fn parse_wkt_points(body: &str, ctx: &str) -> Result<Polyline, ExposureError> {
    let mut points = Vec::new();
    for pair in body.split(',') {
        let mut it = pair.split_whitespace();
        let (Some(x), Some(y)) = (it.next(), it.next()) else {
            return Err(parse_err(ctx, format!("bad WKT coordinate {pair:?}")));
        };
        let lng: f64 = x
            .parse()
            .map_err(|_| parse_err(ctx, format!("bad number {x:?}")))?;
        let lat: f64 = y
            .parse()
            .map_err(|_| parse_err(ctx, format!("bad number {y:?}")))?;
        points.push(GeoPoint::new(lat, lng).map_err(|e| parse_err(ctx, e.to_string()))?);
    }
    Polyline::new(points).map_err(|e| parse_err(ctx, e.to_string()))
}

/// Parses `LINESTRING (x y, ...)` or `MULTILINESTRING ((x y, ...), ...)`.
pub fn parse_wkt_lines(wkt: &str, ctx: &str) -> Result<Vec<Polyline>, ExposureError> {
    let s = wkt.trim();
    let upper = s.to_ascii_uppercase();
    let open = s
        .find('(')
        .ok_or_else(|| parse_err(ctx, "WKT missing '('"))?;
    let close = s
        .rfind(')')
        .ok_or_else(|| parse_err(ctx, "WKT missing ')'"))?;
    let inner = &s[open + 1..close];
    let tag = upper[..open].trim();
    match tag {
        "LINESTRING" => Ok(vec![parse_wkt_points(inner, ctx)?]),
        "MULTILINESTRING" => inner
            .split(')')
            .map(|part| {
                part.trim()
                    .trim_start_matches(',')
                    .trim()
                    .trim_start_matches('(')
            })
            .filter(|part| !part.trim().is_empty())
            .map(|part| parse_wkt_points(part, ctx))
            .collect(),
        other => Err(parse_err(ctx, format!("unsupported WKT type {other:?}"))),
    }
}

/// Reads the CSV segment layout: `geometry` (WKT), `aadt`, `functional_class`,
/// `is_surface_street`.
pub fn read_segments_csv<R: Read>(reader: R) -> Result<Vec<RoadSegment>, ExposureError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let geom_col =
        col("geometry").ok_or_else(|| parse_err("segments csv", "missing column \"geometry\""))?;
    let aadt_col =
        col("aadt").ok_or_else(|| parse_err("segments csv", "missing column \"aadt\""))?;
    let (class_col, surface_col) = (col("functional_class"), col("is_surface_street"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ctx = format!("line {}", rec.position().map(|p| p.line()).unwrap_or(0));
        let aadt: f64 = rec
            .get(aadt_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| parse_err(&ctx, "invalid aadt"))?;
        let class = class_col.and_then(|c| rec.get(c)).unwrap_or("").trim();
        let surface = match surface_col.and_then(|c| rec.get(c)).map(str::trim) {
            None | Some("") => true,
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(parse_err(&ctx, format!("invalid is_surface_street {v:?}"))),
            },
        };
        for line in parse_wkt_lines(rec.get(geom_col).unwrap_or(""), &ctx)? {
            out.push(
                RoadSegment::new(line, aadt, class, surface)
                    .map_err(|e| parse_err(&ctx, e.to_string()))?,
            );
        }
    }
    Ok(out)
}

/// Loads segments from `.csv` (WKT geometry) or GeoJSON (anything else).
pub fn load_segments(path: &Path) -> Result<Vec<RoadSegment>, ExposureError> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let f = std::fs::File::open(path).map_err(|source| ExposureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        read_segments_csv(f)
    } else {
        parse_segments_geojson(&read_file(path)?)
    }
}

pub fn segments_to_geojson(segments: &[RoadSegment]) -> Value {
    let features: Vec<Value> = segments
        .iter()
        .map(|s| {
            let coords: Vec<Value> = s
                .geometry
                .points()
                .iter()
                .map(|p| json!([p.lng(), p.lat()]))
                .collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {
                    "aadt": s.aadt,
                    "functional_class": s.functional_class,
                    "is_surface_street": s.is_surface_street,
                },
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Time-of-day shares: human VMT per window and, optionally, ADS miles.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeShares {
    pub human: BTreeMap<SliceKey, f64>,
    pub ads: Option<BTreeMap<SliceKey, f64>>,
}

/// Reads `window,human_vmt_share[,ads_miles_share]`; each of the five windows
/// must appear exactly once.
pub fn read_time_shares<R: Read>(reader: R) -> Result<TimeShares, ExposureError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ctx = "time shares";
    let w_col = col("window").ok_or_else(|| parse_err(ctx, "missing column \"window\""))?;
    let h_col = col("human_vmt_share")
        .ok_or_else(|| parse_err(ctx, "missing column \"human_vmt_share\""))?;
    let a_col = col("ads_miles_share");
    let mut human = BTreeMap::new();
    let mut ads = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = format!("line {}", rec.position().map(|p| p.line()).unwrap_or(0));
        let window: TimeWindow = rec
            .get(w_col)
            .unwrap_or("")
            .parse()
            .map_err(|m: String| parse_err(&line, m))?;
        let num = |c: usize| -> Result<f64, ExposureError> {
            let raw = rec.get(c).unwrap_or("").trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(&line, format!("invalid share {raw:?}")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(parse_err(
                    &line,
                    format!("share must be finite and >= 0, got {v}"),
                ));
            }
            Ok(v)
        };
        if human
            .insert(SliceKey::Window(window), num(h_col)?)
            .is_some()
        {
            return Err(parse_err(&line, format!("window {window} listed twice")));
        }
        if let Some(c) = a_col {
            ads.insert(SliceKey::Window(window), num(c)?);
        }
    }
    if let Some(missing) = TimeWindow::ALL
        .iter()
        .find(|w| !human.contains_key(&SliceKey::Window(**w)))
    {
        return Err(parse_err(ctx, format!("window {missing} missing")));
    }
    Ok(TimeShares {
        human,
        ads: a_col.map(|_| ads),
    })
}

pub fn load_time_shares(path: &Path) -> Result<TimeShares, ExposureError> {
    read_time_shares(read_file(path)?.as_bytes())
}
