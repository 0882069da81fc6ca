//! K-line (OHLCVA candlestick) records, bar frequencies and series slicing.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Timelike, Utc};

use crate::{Error, Result};

/// Number of channels per bar: open, high, low, close, volume, amount.
pub const CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frequency {
    Min1,
    Min5,
    Min10,
    Min15,
    Min20,
    Min30,
    Min40,
    Min60,
    Hour2,
    Hour4,
    Daily,
    Weekly,
}

impl Frequency {
    pub const ALL: [Frequency; 12] = [
        Frequency::Min1,
        Frequency::Min5,
        Frequency::Min10,
        Frequency::Min15,
        Frequency::Min20,
        Frequency::Min30,
        Frequency::Min40,
        Frequency::Min60,
        Frequency::Hour2,
        Frequency::Hour4,
        Frequency::Daily,
        Frequency::Weekly,
    ];

    pub fn bar_seconds(self) -> i64 {
        match self {
            Frequency::Min1 => 60,
            Frequency::Min5 => 300,
            Frequency::Min10 => 600,
            Frequency::Min15 => 900,
            Frequency::Min20 => 1200,
            Frequency::Min30 => 1800,
            Frequency::Min40 => 2400,
            Frequency::Min60 => 3600,
            Frequency::Hour2 => 7200,
            Frequency::Hour4 => 14400,
            Frequency::Daily => 86_400,
            Frequency::Weekly => 7 * 86_400,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Frequency::Min1 => "1min",
            Frequency::Min5 => "5min",
            Frequency::Min10 => "10min",
            Frequency::Min15 => "15min",
            Frequency::Min20 => "20min",
            Frequency::Min30 => "30min",
            Frequency::Min40 => "40min",
            Frequency::Min60 => "60min",
            Frequency::Hour2 => "2h",
            Frequency::Hour4 => "4h",
            Frequency::Daily => "daily",
            Frequency::Weekly => "weekly",
        }
    }

    pub fn is_intraday(self) -> bool {
        !matches!(self, Frequency::Daily | Frequency::Weekly)
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Frequency::ALL
            .into_iter()
            .find(|f| f.name() == lower)
            .or(match lower.as_str() {
                "1d" | "day" => Some(Frequency::Daily),
                "1w" | "week" => Some(Frequency::Weekly),
                "1h" => Some(Frequency::Min60),
                _ => None,
            })
            .ok_or_else(|| Error::config("frequency", format!("unknown frequency {s:?}")))
    }
}

/// One OHLCVA bar. Prices may be NaN only before cleaning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KLineRecord {
    /// UTC seconds since the epoch, marking the bar open.
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub amount: f64,
    pub volume_present: bool,
    pub amount_present: bool,
}

impl KLineRecord {
    pub fn new(timestamp: i64, open: f64, high: f64, low: f64, close: f64, volume: f64, amount: f64) -> Self {
        KLineRecord {
            timestamp,
            open,
            high,
            low,
            close,
            volume,
            amount,
            volume_present: volume.is_finite(),
            amount_present: amount.is_finite(),
        }
    }

    pub fn prices(&self) -> [f64; 4] {
        [self.open, self.high, self.low, self.close]
    }

    pub fn prices_finite(&self) -> bool {
        self.prices().iter().all(|p| p.is_finite())
    }

    pub fn to_array(&self) -> [f64; CHANNELS] {
        [self.open, self.high, self.low, self.close, self.volume, self.amount]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KLineSeries {
    pub asset_id: String,
    pub frequency: Frequency,
    pub records: Vec<KLineRecord>,
}

impl KLineSeries {
    pub fn new(asset_id: impl Into<String>, frequency: Frequency, records: Vec<KLineRecord>) -> Self {
        KLineSeries {
            asset_id: asset_id.into(),
            frequency,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.timestamp).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.close).collect()
    }

    /// Rows of `[open, high, low, close, volume, amount]`.
    pub fn to_matrix(&self) -> Vec<[f64; CHANNELS]> {
        self.records.iter().map(KLineRecord::to_array).collect()
    }

    /// Whole-series segment.
    pub fn full_segment(&self) -> Segment {
        Segment::new(self, 0, self.len())
    }
}

/// Half-open index range `[start, end)` into a parent series.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub asset_id: String,
    pub frequency: Frequency,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(series: &KLineSeries, start: usize, end: usize) -> Self {
        Segment {
            asset_id: series.asset_id.clone(),
            frequency: series.frequency,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub rule: &'static str,
}

/// Every invariant violation, in record order. Empty iff well-formed.
pub fn validate_series(series: &KLineSeries) -> Vec<Violation> {
    let mut out = Vec::new();
    let bar = series.frequency.bar_seconds();
    for (i, r) in series.records.iter().enumerate() {
        if i > 0 && r.timestamp <= series.records[i - 1].timestamp {
            out.push(Violation {
                index: i,
                rule: "timestamp_order",
            });
        }
        let aligned = if series.frequency.is_intraday() {
            r.timestamp.rem_euclid(bar) == 0
        } else {
            r.timestamp.rem_euclid(86_400) == 0
        };
        if !aligned {
            out.push(Violation {
                index: i,
                rule: "bar_alignment",
            });
        }
        if r.prices_finite() && (r.low > r.open.min(r.close) || r.high < r.open.max(r.close) || r.low > r.high) {
            out.push(Violation {
                index: i,
                rule: "ohlc_bounds",
            });
        }
        if r.volume_present && r.volume < 0.0 {
            out.push(Violation {
                index: i,
                rule: "negative_volume",
            });
        }
        if r.amount_present && r.amount < 0.0 {
            out.push(Violation {
                index: i,
                rule: "negative_amount",
            });
        }
    }
    out
}

pub fn slice(series: &KLineSeries, segment: &Segment) -> Result<KLineSeries> {
    if segment.start >= segment.end || segment.end > series.len() {
        return Err(Error::Range(format!(
            "segment [{}, {}) on series of length {}",
            segment.start,
            segment.end,
            series.len()
        )));
    }
    Ok(KLineSeries {
        asset_id: series.asset_id.clone(),
        frequency: series.frequency,
        records: series.records[segment.start..segment.end].to_vec(),
    })
}

/// Calendar fields of a UTC timestamp:
/// (minute of hour, hour of day, day of week Mon=0, day of month, month).
pub fn calendar_fields(timestamp: i64) -> (u32, u32, u32, u32, u32) {
    let dt: DateTime<Utc> = DateTime::from_timestamp(timestamp, 0).unwrap_or_default();
    (
        dt.minute(),
        dt.hour(),
        dt.weekday().num_days_from_monday(),
        dt.day(),
        dt.month(),
    )
}
