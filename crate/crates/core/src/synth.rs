//! Synthetic counties with known slice rates, for estimator and coverage
//! checks.
//!
//! Slices are a rectangular block of adjacent cells around an anchor point.
//! Each slice gets one straight road segment whose length × AADT equals the
//! slice's human VMT, so relative VMT reproduces `human_vmt` exactly and the
//! whole geometry path stays in play.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::{self, RoadSegment};
use crate::geoindex::{self, CellId, GeoPoint, Polyline, METERS_PER_MILE};
use crate::ingest::{self, AdsLocation, AdsMileageRecord, CrashRecord, CrashSource, SeverityFlags};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("oracle multiplier undefined: human-weighted rate is zero")]
    ZeroDenominator,
    #[error("{0}")]
    Io(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub lat: f64,
    pub lng: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// Slice indices receiving this stage's miles.
    pub active: Vec<usize>,
    pub miles: f64,
    /// Relative weights over `active`; equal split when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub fleet_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdsProfile {
    PerSlice {
        miles: Vec<f64>,
        #[serde(default)]
        fleet_tag: Option<String>,
    },
    Staged {
        stages: Vec<Stage>,
    },
}

/// Probability that a crash reaches each severity level. Levels are drawn
/// nested, so they must satisfy `fatal <= serious_plus <= any_injury`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeverityProbs {
    #[serde(default)]
    pub any_injury: f64,
    #[serde(default)]
    pub airbag: f64,
    #[serde(default)]
    pub serious_plus: f64,
    #[serde(default)]
    pub fatal: f64,
}

fn default_level() -> u8 {
    13
}
fn default_record_miles() -> f64 {
    1.0
}
fn default_start() -> String {
    "2023-01-01T00:00:00".into()
}
fn default_step_secs() -> i64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: u8,
    pub anchor: Anchor,
    /// Columns of the slice block; defaults to `ceil(sqrt(n_slices))`.
    #[serde(default)]
    pub grid_cols: Option<usize>,
    /// Crashes per mile for each slice.
    pub rates: Vec<f64>,
    pub human_vmt: Vec<f64>,
    pub ads: AdsProfile,
    /// Upper bound on miles carried by one ADS record.
    #[serde(default = "default_record_miles")]
    pub ads_record_miles: f64,
    #[serde(default)]
    pub severity_probs: SeverityProbs,
    #[serde(default = "default_start")]
    pub start: String,
    /// Seconds between consecutive ADS records.
    #[serde(default = "default_step_secs")]
    pub ads_step_secs: i64,
}

impl SynthSpec {
    pub fn n_slices(&self) -> usize {
        self.rates.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.rates.len();
        if n == 0 {
            return Err(invalid("no slices"));
        }
        if self.human_vmt.len() != n {
            return Err(invalid(format!(
                "{} rates but {} human_vmt values",
                n,
                self.human_vmt.len()
            )));
        }
        let nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.rates.iter().chain(&self.human_vmt).all(nonneg) {
            return Err(invalid("rates and human_vmt must be finite and >= 0"));
        }
        if !self.human_vmt.iter().any(|m| *m > 0.0) {
            return Err(invalid("at least one slice needs positive human_vmt"));
        }
        if self.level > geoindex::MAX_LEVEL {
            return Err(invalid(format!("level {} > 30", self.level)));
        }
        GeoPoint::new(self.anchor.lat, self.anchor.lng).map_err(|e| invalid(e.to_string()))?;
        if !(self.ads_record_miles > 0.0 && self.ads_record_miles.is_finite()) {
            return Err(invalid("ads_record_miles must be positive"));
        }
        if self.ads_step_secs < 0 {
            return Err(invalid("ads_step_secs must be >= 0"));
        }
        ingest::parse_timestamp(&self.start).map_err(invalid)?;
        let cols = self.cols();
        let side = 1usize << self.level.min(30);
        if cols == 0 || cols > side || n.div_ceil(cols) > side {
            return Err(invalid(
                "slice block does not fit on one cube face at this level",
            ));
        }
        let p = &self.severity_probs;
        let probs = [p.any_injury, p.airbag, p.serious_plus, p.fatal];
        if !probs.iter().all(|x| (0.0..=1.0).contains(x))
            || p.fatal > p.serious_plus
            || p.serious_plus > p.any_injury
        {
            return Err(invalid(
                "severity_probs must lie in [0, 1] with fatal <= serious_plus <= any_injury",
            ));
        }
        match &self.ads {
            AdsProfile::PerSlice { miles, .. } => {
                if miles.len() != n {
                    return Err(invalid(format!(
                        "{} per-slice ADS miles for {} slices",
                        miles.len(),
                        n
                    )));
                }
                if !miles.iter().all(nonneg) {
                    return Err(invalid("ADS miles must be finite and >= 0"));
                }
            }
            AdsProfile::Staged { stages } => {
                for (k, st) in stages.iter().enumerate() {
                    if st.active.is_empty() || st.active.iter().any(|&i| i >= n) {
                        return Err(invalid(format!(
                            "stage {k}: active slices must be non-empty indices < {n}"
                        )));
                    }
                    if !nonneg(&st.miles) {
                        return Err(invalid(format!("stage {k}: miles must be finite and >= 0")));
                    }
                    if let Some(w) = &st.weights {
                        if w.len() != st.active.len()
                            || !w.iter().all(nonneg)
                            || !(w.iter().sum::<f64>() > 0.0)
                        {
                            return Err(invalid(format!(
                                "stage {k}: weights must match active and have a positive sum"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn cols(&self) -> usize {
        self.grid_cols
            .unwrap_or_else(|| (self.rates.len() as f64).sqrt().ceil() as usize)
    }

    /// Cell for each slice, laid out row-major around the anchor's cell.
    pub fn cells(&self) -> Result<Vec<CellId>, SynthError> {
        self.validate()?;
        let anchor =
            GeoPoint::new(self.anchor.lat, self.anchor.lng).map_err(|e| invalid(e.to_string()))?;
        let center =
            geoindex::cell_from_point(anchor, self.level).map_err(|e| invalid(e.to_string()))?;
        let (i0, j0) = center.face_ij();
        let side = 1u64 << self.level;
        let cols = self.cols() as u64;
        let rows = self.rates.len().div_ceil(self.cols()) as u64;
        let start = |c: u64, span: u64| c.saturating_sub(span / 2).min(side - span);
        let (is, js) = (start(i0, cols), start(j0, rows));
        (0..self.rates.len() as u64)
            .map(|k| {
                CellId::from_face_ij(center.face(), self.level, is + k % cols, js + k / cols)
                    .map_err(|e| invalid(e.to_string()))
            })
            .collect()
    }

    /// Total ADS miles per slice across the whole profile.
    pub fn ads_per_slice(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rates.len()];
        for (slice, miles, _) in self.ads_allocations() {
            out[slice] += miles;
        }
        out
    }

    /// `(slice, miles, stage index)` in stage order.
    fn ads_allocations(&self) -> Vec<(usize, f64, usize)> {
        match &self.ads {
            AdsProfile::PerSlice { miles, .. } => {
                miles.iter().enumerate().map(|(i, m)| (i, *m, 0)).collect()
            }
            AdsProfile::Staged { stages } => stages
                .iter()
                .enumerate()
                .flat_map(|(k, st)| {
                    let weights = st
                        .weights
                        .clone()
                        .unwrap_or_else(|| vec![1.0; st.active.len()]);
                    let wsum: f64 = weights.iter().sum();
                    st.active
                        .iter()
                        .zip(weights)
                        .map(move |(&i, w)| (i, st.miles * w / wsum, k))
                        .collect::<Vec<_>>()
                })
                .collect(),
        }
    }

    fn fleet_tag(&self, stage: usize) -> Option<String> {
        match &self.ads {
            AdsProfile::PerSlice { fleet_tag, .. } => fleet_tag.clone(),
            AdsProfile::Staged { stages } => stages[stage].fleet_tag.clone(),
        }
    }

    pub fn expected_crashes(&self) -> f64 {
        self.rates
            .iter()
            .zip(&self.human_vmt)
            .map(|(r, m)| r * m)
            .sum()
    }
}

/// Population multiplier `(Σ f_w·λ) / (Σ f_h·λ)`.
pub fn oracle_multiplier(spec: &SynthSpec) -> Result<f64, SynthError> {
    spec.validate()?;
    let ads = spec.ads_per_slice();
    let total_w: f64 = ads.iter().sum();
    let total_h: f64 = spec.human_vmt.iter().sum();
    if !(total_w > 0.0) {
        return Err(invalid("profile has no ADS miles"));
    }
    let num: f64 = ads
        .iter()
        .zip(&spec.rates)
        .map(|(w, r)| w / total_w * r)
        .sum();
    let den: f64 = spec
        .human_vmt
        .iter()
        .zip(&spec.rates)
        .map(|(h, r)| h / total_h * r)
        .sum();
    if !(den > 0.0) {
        return Err(SynthError::ZeroDenominator);
    }
    Ok(num / den)
}

fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|d| d.sample(rng) as u64)
        .unwrap_or(0)
}

/// Crash count per slice, each drawn Poisson(λ_s · m_s).
pub fn draw_slice_counts(spec: &SynthSpec, seed: u64) -> Result<Vec<u64>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(spec
        .rates
        .iter()
        .zip(&spec.human_vmt)
        .map(|(r, m)| poisson_draw(&mut rng, r * m))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub cells: Vec<CellId>,
    pub crashes: Vec<CrashRecord>,
    pub segments: Vec<RoadSegment>,
    /// Sorted by `recorded_at`.
    pub ads: Vec<AdsMileageRecord>,
}

fn interior<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(0.01..0.99)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    let cells = spec.cells()?;
    let start = ingest::parse_timestamp(&spec.start).map_err(invalid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.severity_probs;

    // counts first, so they match draw_slice_counts for the same seed
    let counts: Vec<u64> = spec
        .rates
        .iter()
        .zip(&spec.human_vmt)
        .map(|(r, m)| poisson_draw(&mut rng, r * m))
        .collect();
    let mut crashes = Vec::new();
    let year_secs = 365 * 24 * 3600;
    for (cell, &n) in cells.iter().zip(&counts) {
        for _ in 0..n {
            let location = cell.point_at(interior(&mut rng), interior(&mut rng));
            let u: f64 = rng.random();
            let airbag = rng.random::<f64>() < p.airbag;
            let occurred_at = start + Duration::seconds(rng.random_range(0..year_secs));
            crashes.push(CrashRecord {
                id: format!("syn-{:08}", crashes.len()),
                location: Some(location),
                occurred_at: Some(occurred_at),
                source: CrashSource::Canonical,
                severity: SeverityFlags::new(
                    u < p.any_injury,
                    airbag,
                    u < p.serious_plus,
                    u < p.fatal,
                ),
                is_surface_street: true,
                is_passenger_vehicle: true,
            });
        }
    }

    let mut segments = Vec::new();
    for (s, cell) in cells.iter().enumerate() {
        if spec.human_vmt[s] <= 0.0 {
            continue;
        }
        // constant-t lines on a face are great circles, so the segment stays in the cell
        let line = Polyline::new(vec![cell.point_at(0.3, 0.5), cell.point_at(0.7, 0.5)])
            .map_err(|e| invalid(e.to_string()))?;
        let miles = line.length_m() / METERS_PER_MILE;
        let seg = RoadSegment::new(line, spec.human_vmt[s] / miles, "synthetic", true)
            .map_err(|e| invalid(e.to_string()))?;
        segments.push(seg);
    }

    let mut ads = Vec::new();
    let allocations = spec.ads_allocations();
    let stages = allocations.iter().map(|a| a.2).max().map_or(0, |m| m + 1);
    let mut clock = start;
    for stage in 0..stages {
        let mut pending: Vec<(usize, f64)> = Vec::new();
        for &(slice, miles, _) in allocations.iter().filter(|a| a.2 == stage) {
            if miles <= 0.0 {
                continue;
            }
            let k = (miles / spec.ads_record_miles).ceil().max(1.0) as usize;
            pending.extend(std::iter::repeat_n((slice, miles / k as f64), k));
        }
        pending.shuffle(&mut rng);
        let tag = spec.fleet_tag(stage);
        for (slice, miles) in pending {
            let p = cells[slice].point_at(interior(&mut rng), interior(&mut rng));
            ads.push(AdsMileageRecord {
                location: AdsLocation::Point(p),
                miles,
                recorded_at: clock,
                fleet_tag: tag.clone(),
            });
            clock += Duration::seconds(spec.ads_step_secs);
        }
    }

    Ok(SynthData {
        cells,
        crashes,
        segments,
        ads,
    })
}

impl SynthData {
    /// Crash count per cell, for checks against the generator.
    pub fn crashes_per_cell(&self, level: u8) -> BTreeMap<CellId, usize> {
        let mut out = BTreeMap::new();
        for c in &self.crashes {
            if let Some(p) = c.location {
                if let Ok(cell) = geoindex::cell_from_point(p, level) {
                    *out.entry(cell).or_insert(0) += 1;
                }
            }
        }
        out
    }

    /// Writes `crashes.csv`, `segments.geojson` and `ads.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |e: std::io::Error| SynthError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let create = |name: &str| File::create(dir.join(name)).map(BufWriter::new).map_err(io);
        ingest::write_crashes(create("crashes.csv")?, &self.crashes)
            .map_err(|e| SynthError::Io(e.to_string()))?;
        ingest::write_ads_mileage(create("ads.csv")?, &self.ads)
            .map_err(|e| SynthError::Io(e.to_string()))?;
        let geojson = exposure::segments_to_geojson(&self.segments);
        serde_json::to_writer(create("segments.geojson")?, &geojson)
            .map_err(|e| SynthError::Io(e.to_string()))?;
        Ok(())
    }
}

pub fn load_spec(path: &Path) -> Result<SynthSpec, SynthError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Timestamp of the first ADS record, for callers that slice by time.
pub fn start_time(spec: &SynthSpec) -> Result<NaiveDateTime, SynthError> {
    ingest::parse_timestamp(&spec.start).map_err(invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(rates: Vec<f64>, human: Vec<f64>, ads: Vec<f64>) -> SynthSpec {
        SynthSpec {
            seed: 1,
            level: 13,
            anchor: Anchor {
                lat: 37.76,
                lng: -122.44,
            },
            grid_cols: None,
            rates,
            human_vmt: human,
            ads: AdsProfile::PerSlice {
                miles: ads,
                fleet_tag: None,
            },
            ads_record_miles: 10.0,
            severity_probs: SeverityProbs::default(),
            start: default_start(),
            ads_step_secs: 60,
        }
    }

    #[test]
    fn oracle_examples() {
        let s = spec(vec![2.0, 6.0], vec![0.5, 0.5], vec![0.25, 0.75]);
        assert!((oracle_multiplier(&s).unwrap() - 1.25).abs() < 1e-12);
        let same = spec(
            vec![2.0, 6.0, 1.0],
            vec![1.0, 2.0, 3.0],
            vec![10.0, 20.0, 30.0],
        );
        assert!((oracle_multiplier(&same).unwrap() - 1.0).abs() < 1e-12);
        let zero = spec(vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]);
        assert!(matches!(
            oracle_multiplier(&zero),
            Err(SynthError::ZeroDenominator)
        ));
    }

    #[test]
    fn zero_rates_zero_crashes() {
        let s = spec(vec![0.0; 4], vec![1e6; 4], vec![5.0; 4]);
        assert!(generate(&s).unwrap().crashes.is_empty());
    }

    #[test]
    fn cells_are_adjacent_block() {
        let s = spec(vec![1e-6; 6], vec![1.0; 6], vec![1.0; 6]);
        let cells = s.cells().unwrap();
        assert_eq!(cells.len(), 6);
        let (i0, j0) = cells[0].face_ij();
        // 3 columns, 2 rows
        assert_eq!(cells[4].face_ij(), (i0 + 1, j0 + 1));
        let unique: std::collections::BTreeSet<_> = cells.iter().collect();
        assert_eq!(unique.len(), 6);
    }

    #[test]
    fn segments_reproduce_human_vmt() {
        let s = spec(vec![1e-6; 4], vec![1000.0, 2500.0, 0.0, 40.0], vec![1.0; 4]);
        let data = generate(&s).unwrap();
        let rel = exposure::relative_vmt(&data.segments, 13, 10.0).unwrap();
        assert_eq!(rel.len(), 3);
        for (cell, want) in data.cells.iter().zip(&s.human_vmt) {
            let got = rel.get(cell).copied().unwrap_or(0.0);
            assert!(
                (got - want).abs() <= 1e-9 * want.max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn crashes_land_in_their_cells() {
        let s = spec(vec![5e-4, 1e-3], vec![1e4, 1e4], vec![1.0, 1.0]);
        let data = generate(&s).unwrap();
        let per_cell = data.crashes_per_cell(13);
        let total: usize = per_cell.values().sum();
        assert_eq!(total, data.crashes.len());
        assert!(per_cell.keys().all(|c| data.cells.contains(c)));
    }

    #[test]
    fn staged_records_are_time_ordered() {
        let mut s = spec(vec![1e-6; 4], vec![1.0; 4], vec![]);
        s.ads = AdsProfile::Staged {
            stages: vec![
                Stage {
                    active: vec![0],
                    miles: 30.0,
                    weights: None,
                    fleet_tag: Some("a".into()),
                },
                Stage {
                    active: vec![1, 2, 3],
                    miles: 90.0,
                    weights: Some(vec![1.0, 1.0, 2.0]),
                    fleet_tag: Some("b".into()),
                },
            ],
        };
        let data = generate(&s).unwrap();
        assert!(data
            .ads
            .windows(2)
            .all(|w| w[0].recorded_at < w[1].recorded_at));
        assert_eq!(data.ads[0].fleet_tag.as_deref(), Some("a"));
        let per = s.ads_per_slice();
        assert_eq!(per, vec![30.0, 22.5, 22.5, 45.0]);
        let total: f64 = data.ads.iter().map(|r| r.miles).sum();
        assert!((total - 120.0).abs() < 1e-9);
    }

    #[test]
    fn validation_errors() {
        let mut s = spec(vec![1.0], vec![1.0, 2.0], vec![1.0]);
        assert!(s.validate().is_err());
        s.human_vmt = vec![0.0];
        assert!(s.validate().is_err());
        s.human_vmt = vec![1.0];
        s.severity_probs.fatal = 0.5;
        assert!(s.validate().is_err());
    }
}
