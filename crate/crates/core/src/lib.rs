//! Exposure-adjusted human crash-rate benchmarks.
//!
//! Human crash rates are computed per slice (a cube-face cell or a
//! time-of-day window) and reweighted by where ADS fleet miles were driven.

pub mod benchmark;
pub mod exposure;
pub mod geoindex;
pub mod ingest;
pub mod report;
pub mod stats;
pub mod synth;

pub use benchmark::{
    Analysis, AnalysisConfig, BenchmarkError, BenchmarkReport, BucketWeighting, SliceStat,
};
pub use exposure::{Dimension, ExposureTable, RoadSegment, SliceKey};
pub use geoindex::{CellId, GeoPoint, Polyline};
pub use ingest::{
    AdsMileageRecord, CrashRecord, Severity, SeverityFlags, TimeWindow, Underreporting,
};
pub use stats::{BootstrapConfig, IntervalEstimate, Statistic};
