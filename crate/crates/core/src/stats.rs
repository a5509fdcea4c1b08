//! Poisson bootstrap for benchmark statistics.
//!
//! Each replicate gives every crash event an independent Poisson(1) weight;
//! exposure is held fixed. Replicate `r` draws from a ChaCha stream keyed by
//! `(seed, r)`, so results do not depend on how replicates are spread over
//! threads. Interval bounds are percentiles with linear interpolation between
//! order statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{self, CrashEvents};
use crate::exposure::ExposureTable;

/// Name of the percentile rule, echoed in report metadata.
pub const QUANTILE_RULE: &str = "linear interpolation between order statistics";
/// Largest share of degenerate replicates tolerated.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("n_replicates must be >= 1")]
    NoReplicates,
    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("{degenerate} of {total} replicates were degenerate for {statistic:?}")]
    TooManyDegenerate {
        statistic: Statistic,
        degenerate: usize,
        total: usize,
    },
    #[error("{0:?} is undefined on the observed data")]
    UndefinedPoint(Statistic),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Unadjusted,
    Dynamic,
    Multiplier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_replicates: 1000,
            alpha: 0.10,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.n_replicates == 0 {
            return Err(StatsError::NoReplicates);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub replicates_used: usize,
    pub degenerate: usize,
}

/// Inverse-CDF sampler for Poisson(1).
struct PoissonOne {
    cdf: [f64; 24],
}

impl PoissonOne {
    fn new() -> Self {
        let mut cdf = [0.0; 24];
        let mut p = (-1.0f64).exp();
        let mut acc = 0.0;
        for (k, slot) in cdf.iter_mut().enumerate() {
            if k > 0 {
                p /= k as f64;
            }
            acc += p;
            *slot = acc;
        }
        cdf[23] = 1.0;
        Self { cdf }
    }

    #[inline]
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut k = 0;
        while u >= self.cdf[k] {
            k += 1;
        }
        k as u32
    }
}

fn evaluate(
    table: &ExposureTable,
    counts: &[f64],
    scale: f64,
    statistic: Statistic,
) -> Option<f64> {
    let stats = benchmark::stats_from_counts(table, counts, scale);
    let unadjusted = || benchmark::unadjusted_rate(&stats).ok();
    let dynamic = || benchmark::dynamic_rate(&stats).ok();
    let value = match statistic {
        Statistic::Unadjusted => unadjusted()?,
        Statistic::Dynamic => dynamic()?,
        Statistic::Multiplier => benchmark::multiplier(dynamic()?, unadjusted()?).ok()?,
    };
    value.is_finite().then_some(value)
}

/// Percentile of sorted data, interpolating linearly between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn replicate_counts(
    events: &CrashEvents,
    slices: usize,
    seed: u64,
    r: usize,
    sampler: &PoissonOne,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    let mut counts = vec![0u32; slices];
    for &s in &events.slice_of {
        counts[s] += sampler.sample(&mut rng);
    }
    counts.into_iter().map(f64::from).collect()
}

/// Bootstrap interval for one statistic.
pub fn poisson_bootstrap(
    events: &CrashEvents,
    table: &ExposureTable,
    statistic: Statistic,
    config: &BootstrapConfig,
) -> Result<IntervalEstimate, StatsError> {
    Ok(poisson_bootstrap_many(events, table, &[statistic], config)?.remove(0))
}

/// Intervals for several statistics computed from the same replicates, so a
/// ratio and its parts share weights.
pub fn poisson_bootstrap_many(
    events: &CrashEvents,
    table: &ExposureTable,
    statistics: &[Statistic],
    config: &BootstrapConfig,
) -> Result<Vec<IntervalEstimate>, StatsError> {
    config.validate()?;
    let raw = events.raw_counts(table.len());
    let points: Vec<f64> = statistics
        .iter()
        .map(|&s| evaluate(table, &raw, events.count_scale, s).ok_or(StatsError::UndefinedPoint(s)))
        .collect::<Result<_, _>>()?;

    let sampler = PoissonOne::new();
    let replicates: Vec<Vec<Option<f64>>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|r| {
            let counts = replicate_counts(events, table.len(), config.seed, r, &sampler);
            statistics
                .iter()
                .map(|&s| evaluate(table, &counts, events.count_scale, s))
                .collect()
        })
        .collect();

    statistics
        .iter()
        .enumerate()
        .map(|(k, &statistic)| {
            let mut values: Vec<f64> = replicates.iter().filter_map(|rep| rep[k]).collect();
            let degenerate = config.n_replicates - values.len();
            if values.is_empty()
                || degenerate as f64 > MAX_DEGENERATE_FRACTION * config.n_replicates as f64
            {
                return Err(StatsError::TooManyDegenerate {
                    statistic,
                    degenerate,
                    total: config.n_replicates,
                });
            }
            values.sort_by(f64::total_cmp);
            Ok(IntervalEstimate {
                point: points[k],
                lo: percentile(&values, config.alpha / 2.0),
                hi: percentile(&values, 1.0 - config.alpha / 2.0),
                replicates_used: values.len(),
                degenerate,
            })
        })
        .collect()
}
