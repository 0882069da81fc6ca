//! CSV ingest and the CSV artifacts written by the commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use kline_core::kline::{validate_series, Frequency, KLineRecord, KLineSeries, Segment, Violation};
use kline_core::pipeline::FilterOutcome;
use kline_core::{Error, Result};

pub const HEADER: [&str; 7] = ["timestamp", "open", "high", "low", "close", "volume", "amount"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeFormat {
    Epoch,
    Iso,
}

fn parse_iso(s: &str) -> Option<i64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

fn parse_timestamp(s: &str, format: TimeFormat, line: usize) -> Result<i64> {
    let parsed = match format {
        TimeFormat::Epoch => s.parse::<i64>().ok(),
        TimeFormat::Iso => parse_iso(s),
    };
    parsed.ok_or_else(|| Error::Parse {
        line,
        msg: match format {
            TimeFormat::Epoch => format!("timestamp {s:?} is not integer epoch seconds like the first row"),
            TimeFormat::Iso => format!("timestamp {s:?} is not ISO-8601 like the first row"),
        },
    })
}

fn parse_field(s: &str, name: &str, line: usize, blank_ok: bool) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() {
        return if blank_ok {
            Ok(f64::NAN)
        } else {
            Err(Error::Parse {
                line,
                msg: format!("{name} is blank"),
            })
        };
    }
    s.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{name} {s:?} is not a number"),
    })
}

/// A parsed file plus any invariant violations found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub series: KLineSeries,
    pub violations: Vec<Violation>,
}

/// Reads `timestamp,open,high,low,close,volume,amount` rows. Prices may be
/// `NaN` (missing bars); blank volume or amount becomes NaN for later
/// imputation. Timestamps are all epoch seconds or all ISO-8601 UTC,
/// decided by the first row.
pub fn read_csv(reader: impl std::io::Read, asset_id: &str, frequency: Frequency) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be exactly {:?}", HEADER.join(",")),
        });
    }
    let mut format = None;
    let mut records: Vec<KLineRecord> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", HEADER.len(), row.len()),
            });
        }
        let ts_text = row[0].trim();
        let fmt = *format.get_or_insert(if ts_text.parse::<i64>().is_ok() {
            TimeFormat::Epoch
        } else {
            TimeFormat::Iso
        });
        let ts = parse_timestamp(ts_text, fmt, line)?;
        if let Some(prev) = records.last() {
            if ts <= prev.timestamp {
                let what = if ts == prev.timestamp { "duplicates" } else { "precedes" };
                return Err(Error::Data(format!(
                    "line {line}: timestamp {ts_text} {what} the timestamp on line {}",
                    lines.last().copied().unwrap_or(0)
                )));
            }
        }
        let mut v = [0.0; 6];
        for (i, name) in HEADER[1..].iter().enumerate() {
            v[i] = parse_field(&row[i + 1], name, line, i >= 4)?;
        }
        records.push(KLineRecord::new(ts, v[0], v[1], v[2], v[3], v[4], v[5]));
        lines.push(line);
    }
    let series = KLineSeries::new(asset_id, frequency, records);
    let violations = validate_series(&series);
    Ok(Ingested { series, violations })
}

/// [`read_csv`] on a file; the asset id defaults to the file stem.
pub fn ingest_csv(path: &Path, frequency: Frequency) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let asset = path.file_stem().and_then(|s| s.to_str()).unwrap_or("asset");
    read_csv(std::io::BufReader::new(file), asset, frequency)
}

/// CSV files of a directory in name order, or the path itself.
pub fn data_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .csv files in {}", path.display())));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Series back to the ingest schema with epoch timestamps.
pub fn series_csv(series: &KLineSeries) -> String {
    let mut out = HEADER.join(",") + "\n";
    for r in &series.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.timestamp,
            num(r.open),
            num(r.high),
            num(r.low),
            num(r.close),
            num(r.volume),
            num(r.amount)
        );
    }
    out
}

/// One row per forecast bar. `rollout_id` is the sample index, or `mean`
/// for the ensemble average.
pub fn forecast_csv(timestamps: &[i64], rollouts: &[Vec<[f64; 6]>], mean: Option<&[[f64; 6]]>) -> String {
    let mut out = String::from("timestamp,open,high,low,close,volume,amount,rollout_id\n");
    let mut emit = |rows: &[[f64; 6]], id: &str| {
        for (t, r) in timestamps.iter().zip(rows) {
            let _ = writeln!(out, "{t},{},{},{},{},{},{},{id}", r[0], r[1], r[2], r[3], r[4], r[5]);
        }
    };
    for (i, r) in rollouts.iter().enumerate() {
        emit(r, &i.to_string());
    }
    if let Some(m) = mean {
        emit(m, "mean");
    }
    out
}

pub const QUALITY_HEADER: &str =
    "asset_id,frequency,segments_kept,bars_dropped,missing_price,illiquid,stagnant,short_segment";

pub fn quality_row(series: &KLineSeries, outcome: &FilterOutcome) -> String {
    let d = &outcome.drops;
    format!(
        "{},{},{},{},{},{},{},{}",
        series.asset_id,
        series.frequency,
        outcome.segments.len(),
        d.total(),
        d.missing_price,
        d.illiquid,
        d.stagnant,
        d.short_segment
    )
}

pub const SEGMENTS_HEADER: &str = "asset_id,start,end,length,start_timestamp,end_timestamp";

pub fn segment_rows(series: &KLineSeries, segments: &[Segment]) -> String {
    let mut out = String::new();
    for s in segments {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            series.asset_id,
            s.start,
            s.end,
            s.len(),
            series.records[s.start].timestamp,
            series.records[s.end - 1].timestamp
        );
    }
    out
}
