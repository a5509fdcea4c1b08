//! Slice crash rates and the estimators built on them.
//!
//! The unadjusted benchmark pools crashes over human VMT. The dynamic
//! benchmark averages slice rates with ADS-mileage weights; it is computed
//! both as a weighted mean ([`dynamic_rate`]) and through the share-ratio
//! decomposition ([`dynamic_rate_from_shares`]) so the two can be checked
//! against each other. Rates are crashes per mile everywhere in this module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::{self, Dimension, ExposureError, ExposureTable, SliceKey};
use crate::geoindex::{self, GeoPoint};
use crate::ingest::{
    time_window, AdsMileageRecord, CrashRecord, IngestError, Severity, Underreporting,
};
use crate::stats::{self, BootstrapConfig, IntervalEstimate, Statistic, StatsError};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("total human exposure is zero")]
    ZeroExposure,
    #[error("total ADS mileage is zero")]
    ZeroAdsMileage,
    #[error("unadjusted rate is zero; multiplier undefined")]
    ZeroUnadjusted,
    #[error("slice {0} has ADS miles but no human VMT")]
    ZeroHumanShare(String),
    #[error("shares sum to {0}, expected 1 ± 1e-6")]
    ShareSum(f64),
    #[error("{0}")]
    InvalidInput(String),
    #[error("need at least {needed} slices with human VMT, have {have}")]
    TooFewSlices { needed: usize, have: usize },
    #[error("operation needs a spatial table")]
    NotSpatial,
    #[error("slice dimension of crashes does not match the exposure table")]
    DimensionMismatch,
    #[error("checkpoint {checkpoint} exceeds total ADS miles {total}")]
    CheckpointBeyondTotal { checkpoint: f64, total: f64 },
    #[error("subset retains no ADS miles")]
    EmptySubset,
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceStat {
    pub key: SliceKey,
    /// Adjusted crash count `c_s`.
    pub crashes: f64,
    pub human_vmt: f64,
    pub ads_miles: f64,
    /// `c_s / m_s^(H)`, zero when the slice has no human VMT.
    pub rate: f64,
}

impl SliceStat {
    pub fn new(key: SliceKey, crashes: f64, human_vmt: f64, ads_miles: f64) -> Self {
        let rate = if human_vmt > 0.0 {
            crashes / human_vmt
        } else {
            0.0
        };
        Self {
            key,
            crashes,
            human_vmt,
            ads_miles,
            rate,
        }
    }
}

/// Crash events of one severity, each mapped to a row of an [`ExposureTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrashEvents {
    pub slice_of: Vec<usize>,
    /// Deterministic underreporting multiplier applied to counts.
    pub count_scale: f64,
    /// Events whose slice is not retained in the table.
    pub outside_retained: usize,
    /// Events lacking the location or timestamp needed to find a slice.
    pub without_slice: usize,
}

impl CrashEvents {
    pub fn raw_counts(&self, slices: usize) -> Vec<f64> {
        let mut counts = vec![0.0; slices];
        for &s in &self.slice_of {
            counts[s] += 1.0;
        }
        counts
    }
}

fn crash_slice(
    crash: &CrashRecord,
    dimension: Dimension,
) -> Result<Option<SliceKey>, BenchmarkError> {
    Ok(match dimension {
        Dimension::Spatial { level } => match crash.location {
            Some(p) => Some(SliceKey::Cell(
                geoindex::cell_from_point(p, level).map_err(ExposureError::from)?,
            )),
            None => None,
        },
        Dimension::Temporal => crash
            .occurred_at
            .map(|t| SliceKey::Window(time_window(t.time()))),
    })
}

/// Maps crashes matching `severity` onto table rows.
pub fn assign_crashes(
    crashes: &[CrashRecord],
    table: &ExposureTable,
    dimension: Dimension,
    severity: Severity,
    underreporting: &Underreporting,
) -> Result<CrashEvents, BenchmarkError> {
    if let Some(spatial) = table.dimension_is_spatial() {
        if spatial != matches!(dimension, Dimension::Spatial { .. }) {
            return Err(BenchmarkError::DimensionMismatch);
        }
    }
    let mut events = CrashEvents {
        slice_of: Vec::new(),
        count_scale: underreporting.multiplier(severity)?,
        outside_retained: 0,
        without_slice: 0,
    };
    for crash in crashes.iter().filter(|c| severity.matches(&c.severity)) {
        match crash_slice(crash, dimension)? {
            None => events.without_slice += 1,
            Some(key) => match table.index_of(&key) {
                Some(i) => events.slice_of.push(i),
                None => events.outside_retained += 1,
            },
        }
    }
    Ok(events)
}

/// One [`SliceStat`] per table row from raw per-row counts.
pub fn stats_from_counts(
    table: &ExposureTable,
    raw_counts: &[f64],
    count_scale: f64,
) -> Vec<SliceStat> {
    table
        .rows()
        .iter()
        .zip(raw_counts)
        .map(|(row, &c)| {
            let adjusted = if count_scale == 1.0 {
                c
            } else {
                c * count_scale
            };
            SliceStat::new(row.key, adjusted, row.human_vmt, row.ads_miles)
        })
        .collect()
}

/// Per-slice rates for `severity`, with the underreporting adjustment applied.
pub fn slice_rates(
    crashes: &[CrashRecord],
    table: &ExposureTable,
    dimension: Dimension,
    severity: Severity,
    underreporting: &Underreporting,
) -> Result<(Vec<SliceStat>, CrashEvents), BenchmarkError> {
    let events = assign_crashes(crashes, table, dimension, severity, underreporting)?;
    let stats = stats_from_counts(table, &events.raw_counts(table.len()), events.count_scale);
    Ok((stats, events))
}

/// Pooled `Σ c_s / Σ m_s^(H)`.
pub fn unadjusted_rate(stats: &[SliceStat]) -> Result<f64, BenchmarkError> {
    let miles: f64 = stats.iter().map(|s| s.human_vmt).sum();
    if !(miles > 0.0) {
        return Err(BenchmarkError::ZeroExposure);
    }
    Ok(stats.iter().map(|s| s.crashes).sum::<f64>() / miles)
}

fn ads_weighted(stats: &[SliceStat]) -> Result<(f64, f64, f64), BenchmarkError> {
    let total: f64 = stats.iter().map(|s| s.ads_miles).sum();
    if !(total > 0.0) {
        return Err(BenchmarkError::ZeroAdsMileage);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in stats.iter().filter(|s| s.ads_miles > 0.0) {
        if !(s.human_vmt > 0.0) {
            return Err(BenchmarkError::ZeroHumanShare(s.key.to_string()));
        }
        lo = lo.min(s.rate);
        hi = hi.max(s.rate);
    }
    Ok((total, lo, hi))
}

/// ADS-mileage-weighted mean of slice rates.
pub fn dynamic_rate(stats: &[SliceStat]) -> Result<f64, BenchmarkError> {
    let (total, lo, hi) = ads_weighted(stats)?;
    // offsets from the minimum are non-negative, so constant rates come back exactly
    let excess: f64 = stats
        .iter()
        .filter(|s| s.ads_miles > 0.0)
        .map(|s| s.ads_miles * (s.rate - lo))
        .sum();
    Ok((lo + excess / total).clamp(lo, hi))
}

/// `Σ (c_s / M^(H)) · (f_s^(W) / f_s^(H))`.
pub fn dynamic_rate_from_shares(stats: &[SliceStat]) -> Result<f64, BenchmarkError> {
    let (total_ads, _, _) = ads_weighted(stats)?;
    let total_human: f64 = stats.iter().map(|s| s.human_vmt).sum();
    Ok(stats
        .iter()
        .filter(|s| s.ads_miles > 0.0)
        .map(|s| {
            (s.crashes / total_human) * ((s.ads_miles / total_ads) / (s.human_vmt / total_human))
        })
        .sum())
}

pub fn multiplier(dynamic: f64, unadjusted: f64) -> Result<f64, BenchmarkError> {
    if !(unadjusted > 0.0) {
        return Err(BenchmarkError::ZeroUnadjusted);
    }
    Ok(dynamic / unadjusted)
}

/// Multiplier from ADS shares and rates relative to the pooled rate:
/// `Σ f_w,s · rel_s`.
pub fn multiplier_from_shares(
    ads_shares: &[f64],
    rel_rates: &[f64],
) -> Result<f64, BenchmarkError> {
    if ads_shares.len() != rel_rates.len() {
        return Err(BenchmarkError::InvalidInput(format!(
            "{} shares but {} relative rates",
            ads_shares.len(),
            rel_rates.len()
        )));
    }
    if let Some(bad) = ads_shares
        .iter()
        .chain(rel_rates)
        .find(|v| !(v.is_finite() && **v >= 0.0))
    {
        return Err(BenchmarkError::InvalidInput(format!(
            "shares and rates must be finite and >= 0, got {bad}"
        )));
    }
    let sum: f64 = ads_shares.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(BenchmarkError::ShareSum(sum));
    }
    Ok(ads_shares.iter().zip(rel_rates).map(|(f, r)| f * r).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketWeighting {
    /// Each bucket holds about 1/n of human VMT.
    #[default]
    HumanVmt,
    /// Each bucket holds about 1/n of the slices.
    SliceCount,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// `None` for an empty bucket.
    pub rate_lo: Option<f64>,
    pub rate_hi: Option<f64>,
    pub human_share: f64,
    pub ads_share: f64,
    /// Pooled crashes over human VMT in the bucket, per mile.
    pub bucket_rate: Option<f64>,
    pub slice_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub weighting: BucketWeighting,
    pub buckets: Vec<Bucket>,
}

/// Groups slices into `n` rate-ordered buckets. Slices are never split; a
/// slice goes to the bucket containing the midpoint of its cumulative weight.
pub fn quantile_buckets(
    stats: &[SliceStat],
    n: usize,
    weighting: BucketWeighting,
) -> Result<BucketReport, BenchmarkError> {
    let mut live: Vec<&SliceStat> = stats.iter().filter(|s| s.human_vmt > 0.0).collect();
    if n == 0 || live.len() < n {
        return Err(BenchmarkError::TooFewSlices {
            needed: n.max(1),
            have: live.len(),
        });
    }
    live.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.key.cmp(&b.key)));
    let total_h: f64 = live.iter().map(|s| s.human_vmt).sum();
    let total_w: f64 = live.iter().map(|s| s.ads_miles).sum();
    let count = live.len() as f64;

    let mut acc = vec![
        (
            0.0f64,
            0.0f64,
            0.0f64,
            0usize,
            f64::INFINITY,
            f64::NEG_INFINITY
        );
        n
    ];
    let mut cum = 0.0;
    for (idx, s) in live.iter().enumerate() {
        let pos = match weighting {
            BucketWeighting::HumanVmt => {
                let mid = (cum + 0.5 * s.human_vmt) / total_h;
                cum += s.human_vmt;
                mid
            }
            BucketWeighting::SliceCount => (idx as f64 + 0.5) / count,
        };
        let b = ((pos * n as f64).floor() as usize).min(n - 1);
        let a = &mut acc[b];
        a.0 += s.human_vmt;
        a.1 += s.ads_miles;
        a.2 += s.crashes;
        a.3 += 1;
        a.4 = a.4.min(s.rate);
        a.5 = a.5.max(s.rate);
    }
    let buckets = acc
        .into_iter()
        .map(|(h, w, c, k, lo, hi)| Bucket {
            rate_lo: (k > 0).then_some(lo),
            rate_hi: (k > 0).then_some(hi),
            human_share: h / total_h,
            ads_share: if total_w > 0.0 { w / total_w } else { 0.0 },
            bucket_rate: (h > 0.0).then(|| c / h),
            slice_count: k,
        })
        .collect();
    Ok(BucketReport { weighting, buckets })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub cell: String,
    pub lat: f64,
    pub lng: f64,
    pub f_h: f64,
    pub f_w: f64,
    /// Crashes per mile.
    pub rate: f64,
}

/// One row per retained cell, including cells with no ADS miles.
pub fn heatmap_export(
    table: &ExposureTable,
    stats: &[SliceStat],
) -> Result<Vec<HeatmapRow>, BenchmarkError> {
    if table.dimension_is_spatial() == Some(false) {
        return Err(BenchmarkError::NotSpatial);
    }
    table
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let cell = row.key.cell().ok_or(BenchmarkError::NotSpatial)?;
            let center: GeoPoint = cell.center();
            Ok(HeatmapRow {
                cell: cell.token(),
                lat: center.lat(),
                lng: center.lng(),
                f_h: table.f_h(i),
                f_w: table.f_w(i),
                rate: stats.get(i).map(|s| s.rate).unwrap_or(0.0),
            })
        })
        .collect()
}

/// Bootstrap intervals for the three headline statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportIntervals {
    pub unadjusted: IntervalEstimate,
    pub dynamic: IntervalEstimate,
    pub multiplier: Option<IntervalEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub severity: Severity,
    /// Per mile.
    pub unadjusted_rate: f64,
    /// Per mile.
    pub dynamic_rate: f64,
    /// `None` when the unadjusted rate is zero.
    pub multiplier: Option<f64>,
    pub intervals: Option<ReportIntervals>,
    /// Adjusted crash total over retained slices.
    pub total_crashes: f64,
    pub raw_crashes: usize,
    pub m_h: f64,
    pub m_w: f64,
    pub excluded_ads_miles: f64,
    pub excluded_ads_fraction: f64,
    pub exclusion_warning: bool,
    pub slice_count: usize,
    pub crashes_outside_retained: usize,
    pub crashes_without_slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MilestonePoint {
    pub cumulative_miles: f64,
    pub multiplier: f64,
    pub ci: Option<IntervalEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisConfig {
    pub dimension: Dimension,
    pub underreporting: Underreporting,
    pub warn_threshold: f64,
}

/// Fixed human side (slice VMT plus crashes) against which ADS mileage sets
/// are evaluated.
#[derive(Debug, Clone)]
pub struct Analysis<'a> {
    human: BTreeMap<SliceKey, f64>,
    crashes: &'a [CrashRecord],
    config: AnalysisConfig,
}

impl<'a> Analysis<'a> {
    pub fn new(
        human: BTreeMap<SliceKey, f64>,
        crashes: &'a [CrashRecord],
        config: AnalysisConfig,
    ) -> Self {
        Self {
            human,
            crashes,
            config,
        }
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn human(&self) -> &BTreeMap<SliceKey, f64> {
        &self.human
    }

    pub fn exposure(&self, ads: &[AdsMileageRecord]) -> Result<ExposureTable, BenchmarkError> {
        let binned = exposure::bin_ads_miles(ads, self.config.dimension)?;
        Ok(exposure::join_exposure(&self.human, &binned)?
            .with_warn_threshold(self.config.warn_threshold))
    }

    pub fn events(
        &self,
        table: &ExposureTable,
        severity: Severity,
    ) -> Result<CrashEvents, BenchmarkError> {
        assign_crashes(
            self.crashes,
            table,
            self.config.dimension,
            severity,
            &self.config.underreporting,
        )
    }

    pub fn slice_stats(
        &self,
        ads: &[AdsMileageRecord],
        severity: Severity,
    ) -> Result<(ExposureTable, Vec<SliceStat>), BenchmarkError> {
        let table = self.exposure(ads)?;
        let events = self.events(&table, severity)?;
        let stats = stats_from_counts(&table, &events.raw_counts(table.len()), events.count_scale);
        Ok((table, stats))
    }

    pub fn report(
        &self,
        ads: &[AdsMileageRecord],
        severity: Severity,
        bootstrap: Option<&BootstrapConfig>,
    ) -> Result<BenchmarkReport, BenchmarkError> {
        let table = self.exposure(ads)?;
        report_for_table(&table, &self.events(&table, severity)?, severity, bootstrap)
    }

    /// Full pipeline on the ADS records accepted by `filter`.
    pub fn subset_report<F>(
        &self,
        ads: &[AdsMileageRecord],
        filter: F,
        severity: Severity,
        bootstrap: Option<&BootstrapConfig>,
    ) -> Result<BenchmarkReport, BenchmarkError>
    where
        F: Fn(&AdsMileageRecord) -> bool,
    {
        let subset: Vec<AdsMileageRecord> = ads.iter().filter(|r| filter(r)).cloned().collect();
        if !(subset.iter().map(|r| r.miles).sum::<f64>() > 0.0) {
            return Err(BenchmarkError::EmptySubset);
        }
        self.report(&subset, severity, bootstrap)
    }

    /// Multiplier recomputed on the first `c` ADS miles (in timestamp order)
    /// for each checkpoint `c`; a record straddling a checkpoint contributes
    /// pro rata.
    pub fn milestones(
        &self,
        ads: &[AdsMileageRecord],
        severity: Severity,
        checkpoints: &[f64],
        bootstrap: Option<&BootstrapConfig>,
    ) -> Result<Vec<MilestonePoint>, BenchmarkError> {
        if checkpoints.is_empty() {
            return Err(BenchmarkError::InvalidInput("no checkpoints given".into()));
        }
        if checkpoints.iter().any(|c| !(c.is_finite() && *c > 0.0))
            || checkpoints.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(BenchmarkError::InvalidInput(
                "checkpoints must be positive and strictly increasing".into(),
            ));
        }
        let mut order: Vec<usize> = (0..ads.len()).collect();
        order.sort_by_key(|&i| (ads[i].recorded_at, i));
        let keyed: Vec<(SliceKey, f64)> = order
            .iter()
            .map(|&i| {
                Ok((
                    exposure::ads_slice(&ads[i], self.config.dimension)?,
                    ads[i].miles,
                ))
            })
            .collect::<Result<_, BenchmarkError>>()?;
        let total: f64 = keyed.iter().map(|(_, m)| m).sum();
        let last = *checkpoints.last().unwrap();
        if last > total * (1.0 + 1e-9) {
            return Err(BenchmarkError::CheckpointBeyondTotal {
                checkpoint: last,
                total,
            });
        }

        let base = exposure::join_exposure(&self.human, &BTreeMap::new())?;
        let events = self.events(&base, severity)?;
        let counts = events.raw_counts(base.len());
        let mut running: BTreeMap<SliceKey, f64> = BTreeMap::new();
        let (mut cum, mut next) = (0.0, 0);
        let mut out = Vec::with_capacity(checkpoints.len());
        for &c in checkpoints {
            while next < keyed.len() && cum + keyed[next].1 <= c {
                *running.entry(keyed[next].0).or_insert(0.0) += keyed[next].1;
                cum += keyed[next].1;
                next += 1;
            }
            let mut snapshot = running.clone();
            if next < keyed.len() && cum < c {
                *snapshot.entry(keyed[next].0).or_insert(0.0) += c - cum;
            }
            let table = base.with_ads(&snapshot)?;
            let stats = stats_from_counts(&table, &counts, events.count_scale);
            let point = multiplier(dynamic_rate(&stats)?, unadjusted_rate(&stats)?)?;
            let ci = match bootstrap {
                Some(cfg) => Some(stats::poisson_bootstrap(
                    &events,
                    &table,
                    Statistic::Multiplier,
                    cfg,
                )?),
                None => None,
            };
            out.push(MilestonePoint {
                cumulative_miles: c,
                multiplier: point,
                ci,
            });
        }
        Ok(out)
    }

    pub fn buckets(
        &self,
        ads: &[AdsMileageRecord],
        severity: Severity,
        n: usize,
        weighting: BucketWeighting,
    ) -> Result<BucketReport, BenchmarkError> {
        let (_, stats) = self.slice_stats(ads, severity)?;
        quantile_buckets(&stats, n, weighting)
    }

    pub fn heatmap(
        &self,
        ads: &[AdsMileageRecord],
        severity: Severity,
    ) -> Result<Vec<HeatmapRow>, BenchmarkError> {
        let (table, stats) = self.slice_stats(ads, severity)?;
        heatmap_export(&table, &stats)
    }
}

/// Point estimates (and optional bootstrap intervals) for one table.
pub fn report_for_table(
    table: &ExposureTable,
    events: &CrashEvents,
    severity: Severity,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<BenchmarkReport, BenchmarkError> {
    let stats = stats_from_counts(table, &events.raw_counts(table.len()), events.count_scale);
    let unadjusted = unadjusted_rate(&stats)?;
    let dynamic = dynamic_rate(&stats)?;
    let mult = multiplier(dynamic, unadjusted).ok();
    let intervals = match bootstrap {
        Some(cfg) => {
            let wanted: &[Statistic] = if mult.is_some() {
                &[
                    Statistic::Unadjusted,
                    Statistic::Dynamic,
                    Statistic::Multiplier,
                ]
            } else {
                &[Statistic::Unadjusted, Statistic::Dynamic]
            };
            let mut est = stats::poisson_bootstrap_many(events, table, wanted, cfg)?.into_iter();
            Some(ReportIntervals {
                unadjusted: est.next().unwrap(),
                dynamic: est.next().unwrap(),
                multiplier: est.next(),
            })
        }
        None => None,
    };
    Ok(BenchmarkReport {
        severity,
        unadjusted_rate: unadjusted,
        dynamic_rate: dynamic,
        multiplier: mult,
        intervals,
        total_crashes: stats.iter().map(|s| s.crashes).sum(),
        raw_crashes: events.slice_of.len(),
        m_h: table.total_human(),
        m_w: table.total_ads(),
        excluded_ads_miles: table.excluded_ads_miles(),
        excluded_ads_fraction: table.excluded_fraction(),
        exclusion_warning: table.exclusion_warning(),
        slice_count: table.len(),
        crashes_outside_retained: events.outside_retained,
        crashes_without_slice: events.without_slice,
    })
}
