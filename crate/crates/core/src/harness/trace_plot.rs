use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::saip::{SaipStepRecord, SaipTrace};

const SPARK_LEVELS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
const SPARK_WIDTH: usize = 60;

/// Mean `|s − 1|` over the earliest and the latest tenth of the reverse steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecileSummary {
    pub steps: usize,
    pub decile_len: usize,
    pub first_mean_abs_dev: f64,
    pub last_mean_abs_dev: f64,
}

/// Records are taken in reverse-time order (largest `t` first); a decile is
/// `max(1, n / 10)` records.
pub fn decile_summary(records: &[SaipStepRecord]) -> Result<DecileSummary> {
    if records.is_empty() {
        return Err(Error::Parse("trace has no rows".into()));
    }
    let mut ordered: Vec<&SaipStepRecord> = records.iter().collect();
    ordered.sort_by_key(|r| std::cmp::Reverse(r.t));
    let n = ordered.len();
    let k = (n / 10).max(1);
    let mean_dev = |rs: &[&SaipStepRecord]| {
        rs.iter().map(|r| (r.s - 1.0).abs()).sum::<f64>() / rs.len() as f64
    };
    Ok(DecileSummary {
        steps: n,
        decile_len: k,
        first_mean_abs_dev: mean_dev(&ordered[..k]),
        last_mean_abs_dev: mean_dev(&ordered[n - k..]),
    })
}

/// One character per bucket of consecutive values, scaled between the
/// series minimum and maximum. A constant series renders as a flat baseline.
pub fn sparkline(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let buckets = values.len().min(SPARK_WIDTH);
    let means: Vec<f64> = (0..buckets)
        .map(|b| {
            let lo = b * values.len() / buckets;
            let hi = ((b + 1) * values.len() / buckets).max(lo + 1);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    means
        .iter()
        .map(|v| {
            if span <= 1e-12 * (1.0 + max.abs()) {
                SPARK_LEVELS[0]
            } else {
                let idx = ((v - min) / span * (SPARK_LEVELS.len() - 1) as f64).round() as usize;
                SPARK_LEVELS[idx.min(SPARK_LEVELS.len() - 1)]
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TracePlotSummary {
    pub deciles: DecileSummary,
    pub sparkline: String,
    pub s_min: f64,
    pub s_max: f64,
    pub data_file: PathBuf,
}

impl TracePlotSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "s(t), t = T..1: {}", self.sparkline);
        let _ = writeln!(
            s,
            "range: [{}, {}] over {} steps",
            self.s_min, self.s_max, self.deciles.steps
        );
        let _ = writeln!(
            s,
            "mean|s-1| first decile ({} steps): {}",
            self.deciles.decile_len, self.deciles.first_mean_abs_dev
        );
        let _ = writeln!(
            s,
            "mean|s-1| last decile ({} steps): {}",
            self.deciles.decile_len, self.deciles.last_mean_abs_dev
        );
        let _ = writeln!(s, "gnuplot data: {}", self.data_file.display());
        s
    }
}

/// Summarises a trace CSV and writes `<stem>.dat` (columns `t s`) into
/// `out_dir`, or next to the trace when no directory is given.
pub fn cmd_trace_plot(trace_csv: &Path, out_dir: Option<&Path>) -> Result<TracePlotSummary> {
    let file = std::fs::File::open(trace_csv)
        .map_err(|e| Error::Config(format!("{}: {e}", trace_csv.display())))?;
    let trace = SaipTrace::read_csv(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: {e}", trace_csv.display())))?;
    let deciles = decile_summary(&trace.records)
        .map_err(|e| Error::Parse(format!("{}: {e}", trace_csv.display())))?;

    let mut records = trace.records.clone();
    records.sort_by_key(|r| std::cmp::Reverse(r.t));
    let scales: Vec<f64> = records.iter().map(|r| r.s).collect();
    let mut dat = String::from("# t s\n");
    for r in &records {
        let _ = writeln!(dat, "{} {}", r.t, r.s);
    }
    let stem = trace_csv
        .file_stem()
        .map_or("trace".into(), |s| s.to_string_lossy().into_owned());
    let dir = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.to_path_buf()
        }
        None => trace_csv
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let data_file = dir.join(format!("{stem}.dat"));
    std::fs::write(&data_file, dat)?;
    Ok(TracePlotSummary {
        deciles,
        sparkline: sparkline(&scales),
        s_min: scales.iter().cloned().fold(f64::INFINITY, f64::min),
        s_max: scales.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        data_file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: usize, s: f64) -> SaipStepRecord {
        SaipStepRecord {
            t,
            s,
            omega: 1.0,
            prior_norm_sq: 1.0,
            dot_prior_likelihood: 0.0,
            dot_prior_posterior: 0.0,
            offset_norm: 0.0,
            degenerate: false,
        }
    }

    #[test]
    fn ten_row_deciles_by_hand() {
        // t = 10..1 with s = 1.5, 1.4, ..., 0.6
        let recs: Vec<_> = (0..10)
            .map(|i| record(10 - i, 1.5 - 0.1 * i as f64))
            .collect();
        let d = decile_summary(&recs).unwrap();
        assert_eq!(d.decile_len, 1);
        assert!((d.first_mean_abs_dev - 0.5).abs() < 1e-12);
        assert!((d.last_mean_abs_dev - 0.4).abs() < 1e-12);
    }

    #[test]
    fn deciles_ignore_file_order() {
        let mut recs: Vec<_> = (1..=20)
            .map(|t| record(t, if t > 18 { 3.0 } else { 1.0 }))
            .collect();
        recs.reverse();
        let a = decile_summary(&recs).unwrap();
        recs.reverse();
        let b = decile_summary(&recs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.first_mean_abs_dev, 2.0);
        assert_eq!(a.last_mean_abs_dev, 0.0);
    }

    #[test]
    fn constant_trace_is_flat() {
        let line = sparkline(&[1.0; 100]);
        assert_eq!(line.chars().count(), SPARK_WIDTH);
        assert!(line.chars().all(|c| c == SPARK_LEVELS[0]));
    }

    #[test]
    fn ramp_spans_all_levels() {
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(sparkline(&v), "▁▂▃▄▅▆▇█");
    }
}
