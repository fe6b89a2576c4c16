//! Windowed latency and throughput metrics, their CSV form and phase
//! comparisons.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One completed command: completion time and latency, both in ms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub at_ms: f64,
    pub latency_ms: f64,
}

pub const CSV_HEADER: &str = "window_start_ms,median_ms,p95_ms,iqr_ms,stdev_ms,max_ms,throughput,samples";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub window_start_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub iqr_ms: f64,
    pub stdev_ms: f64,
    pub max_ms: f64,
    /// Commands per second.
    pub throughput: f64,
    pub samples: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

/// Population standard deviation.
pub fn stdev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Sliding windows of `window_ms` every `step_ms` over `[0, end_ms)`.
/// Windows without samples report NaN latencies and zero throughput.
pub fn windows(samples: &[Sample], end_ms: f64, window_ms: f64, step_ms: f64) -> Vec<MetricsRow> {
    let mut sorted: Vec<Sample> = samples.to_vec();
    sorted.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    let mut rows = Vec::new();
    let mut start = 0.0;
    while start + window_ms <= end_ms + 1e-9 {
        let lo = sorted.partition_point(|s| s.at_ms < start);
        let hi = sorted.partition_point(|s| s.at_ms < start + window_ms);
        let mut lat: Vec<f64> = sorted[lo..hi].iter().map(|s| s.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        rows.push(MetricsRow {
            window_start_ms: start,
            median_ms: quantile(&lat, 0.5),
            p95_ms: quantile(&lat, 0.95),
            iqr_ms: quantile(&lat, 0.75) - quantile(&lat, 0.25),
            stdev_ms: stdev(&lat),
            max_ms: lat.last().copied().unwrap_or(f64::NAN),
            throughput: lat.len() as f64 * 1000.0 / window_ms,
            samples: lat.len(),
        });
        start += step_ms;
    }
    rows
}

pub fn write_csv(rows: &[MetricsRow], w: impl Write) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record(CSV_HEADER.split(','))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStats {
    pub windows: usize,
    pub median_latency_ms: f64,
    pub iqr_ms: f64,
    pub stdev_ms: f64,
    pub median_throughput: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaReport {
    pub a: PhaseStats,
    pub b: PhaseStats,
    /// Relative changes from `a` to `b`, e.g. 0.05 for +5%.
    pub median_latency: f64,
    pub iqr: f64,
    pub stdev: f64,
    pub median_throughput: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CompareError {
    #[error("phase {phase} has {windows} windows, need at least {needed}")]
    InsufficientSamples { phase: char, windows: usize, needed: usize },
}

/// Windows needed per phase before a comparison means anything.
pub const MIN_WINDOWS: usize = 3;

fn phase_stats(rows: &[MetricsRow], phase: Range<f64>, window_ms: f64) -> PhaseStats {
    let inside: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.window_start_ms >= phase.start && r.window_start_ms + window_ms <= phase.end + 1e-9)
        .collect();
    let col = |f: fn(&MetricsRow) -> f64| median(&inside.iter().map(|r| f(r)).collect::<Vec<_>>());
    PhaseStats {
        windows: inside.len(),
        median_latency_ms: col(|r| r.median_ms),
        iqr_ms: col(|r| r.iqr_ms),
        stdev_ms: col(|r| r.stdev_ms),
        median_throughput: col(|r| r.throughput),
    }
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (b - a) / a
    }
}

/// Compares the windows of length `window_ms` lying entirely inside each
/// phase.
pub fn compare_windows(rows: &[MetricsRow], a: Range<f64>, b: Range<f64>, window_ms: f64) -> Result<DeltaReport, CompareError> {
    let sa = phase_stats(rows, a, window_ms);
    let sb = phase_stats(rows, b, window_ms);
    for (phase, s) in [('a', &sa), ('b', &sb)] {
        if s.windows < MIN_WINDOWS {
            return Err(CompareError::InsufficientSamples {
                phase,
                windows: s.windows,
                needed: MIN_WINDOWS,
            });
        }
    }
    Ok(DeltaReport {
        median_latency: relative(sa.median_latency_ms, sb.median_latency_ms),
        iqr: relative(sa.iqr_ms, sb.iqr_ms),
        stdev: relative(sa.stdev_ms, sb.stdev_ms),
        median_throughput: relative(sa.median_throughput, sb.median_throughput),
        a: sa,
        b: sb,
    })
}
