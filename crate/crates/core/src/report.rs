//! JSON and CSV rendering of results. Rates are reported per million miles.
//! Numbers are rounded to a fixed number of significant digits so that the
//! same inputs always render to the same bytes.

use std::io::Write;

use serde_json::{json, Value};

use crate::benchmark::{BenchmarkReport, BucketReport, HeatmapRow, MilestonePoint};
use crate::stats::{IntervalEstimate, QUANTILE_RULE};

pub const RATE_DIGITS: usize = 6;
pub const MULTIPLIER_DIGITS: usize = 3;

pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.max(1) - 1, x).parse().unwrap_or(x)
}

/// Per-mile rate to per-million-miles.
pub fn ipmm(rate: f64) -> f64 {
    rate * 1e6
}

fn r6(x: f64) -> Value {
    json!(round_sig(x, RATE_DIGITS))
}

fn r3(x: f64) -> Value {
    json!(round_sig(x, MULTIPLIER_DIGITS))
}

fn interval(est: Option<&IntervalEstimate>, scale: f64, digits: usize) -> Value {
    match est {
        Some(e) => json!({
            "lo": round_sig(e.lo * scale, digits),
            "hi": round_sig(e.hi * scale, digits),
        }),
        None => Value::Null,
    }
}

/// Headline report. `config_echo` and `input_digests` are copied verbatim.
pub fn benchmark_json(report: &BenchmarkReport, config_echo: Value, input_digests: Value) -> Value {
    let iv = report.intervals.as_ref();
    let mult_ci = iv.and_then(|i| i.multiplier.as_ref());
    let bootstrap = match iv {
        Some(i) => json!({
            "replicates_used": mult_ci.unwrap_or(&i.dynamic).replicates_used,
            "degenerate_replicates": mult_ci.unwrap_or(&i.dynamic).degenerate,
            "quantile_rule": QUANTILE_RULE,
        }),
        None => Value::Null,
    };
    json!({
        "severity": report.severity.name(),
        "unadjusted_ipmm": r6(ipmm(report.unadjusted_rate)),
        "dynamic_ipmm": r6(ipmm(report.dynamic_rate)),
        "multiplier": report.multiplier.map(|m| round_sig(m, MULTIPLIER_DIGITS)),
        "ci": interval(mult_ci, 1.0, MULTIPLIER_DIGITS),
        "total_crashes": r6(report.total_crashes),
        "m_h_miles": r6(report.m_h),
        "m_w_miles": r6(report.m_w),
        "excluded_ads_fraction": r6(report.excluded_ads_fraction),
        "slice_count": report.slice_count,
        "config_echo": config_echo,
        "input_digests": input_digests,
        "diagnostics": {
            "raw_crashes": report.raw_crashes,
            "unadjusted_ci_ipmm": interval(iv.map(|i| &i.unadjusted), 1e6, RATE_DIGITS),
            "dynamic_ci_ipmm": interval(iv.map(|i| &i.dynamic), 1e6, RATE_DIGITS),
            "excluded_ads_miles": r6(report.excluded_ads_miles),
            "exclusion_warning": report.exclusion_warning,
            "crashes_outside_retained_slices": report.crashes_outside_retained,
            "crashes_without_slice": report.crashes_without_slice,
            "bootstrap": bootstrap,
        },
    })
}

pub fn buckets_json(report: &BucketReport) -> Value {
    let buckets: Vec<Value> = report
        .buckets
        .iter()
        .enumerate()
        .map(|(i, b)| {
            json!({
                "bucket": i,
                "rate_lo_ipmm": b.rate_lo.map(|r| round_sig(ipmm(r), RATE_DIGITS)),
                "rate_hi_ipmm": b.rate_hi.map(|r| round_sig(ipmm(r), RATE_DIGITS)),
                "human_share": r6(b.human_share),
                "ads_share": r6(b.ads_share),
                "bucket_rate_ipmm": b.bucket_rate.map(|r| round_sig(ipmm(r), RATE_DIGITS)),
                "slice_count": b.slice_count,
            })
        })
        .collect();
    json!({ "weighting": report.weighting, "buckets": buckets })
}

pub fn milestones_json(points: &[MilestonePoint]) -> Value {
    Value::Array(
        points
            .iter()
            .map(|p| {
                json!({
                    "cumulative_miles": r6(p.cumulative_miles),
                    "multiplier": r3(p.multiplier),
                    "ci": interval(p.ci.as_ref(), 1.0, MULTIPLIER_DIGITS),
                })
            })
            .collect(),
    )
}

/// Shares are written at full precision so columns sum to one.
pub fn write_heatmap_csv<W: Write>(writer: W, rows: &[HeatmapRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell", "lat", "lng", "f_h", "f_w", "rate_ipmm"])?;
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.lat.to_string(),
            r.lng.to_string(),
            r.f_h.to_string(),
            r.f_w.to_string(),
            round_sig(ipmm(r.rate), RATE_DIGITS).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Stable pretty rendering with a trailing newline.
pub fn to_pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round_sig(1.23456789, 3), 1.23);
        assert_eq!(round_sig(0.000123456789, 6), 0.000123457);
        assert_eq!(round_sig(987654.0, 3), 988000.0);
        assert_eq!(round_sig(0.0, 3), 0.0);
        assert_eq!(round_sig(-1.005, 2), -1.0);
    }
}
