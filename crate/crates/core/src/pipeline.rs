//! Missing-value handling, low-quality segment filtering and per-window
//! z-score normalization.

use rand::Rng;

use crate::kline::{Frequency, KLineSeries, Segment, CHANNELS};
use crate::{Error, Result};

/// Floor applied to fitted standard deviations before division.
pub const STD_EPSILON: f64 = 1e-8;
/// Normalized values are clipped to `[-CLIP, CLIP]`.
pub const CLIP: f64 = 5.0;

/// Rows of `[open, high, low, close, volume, amount]`.
pub type Matrix = Vec<[f64; CHANNELS]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleaningParams {
    pub min_length: usize,
    /// Relative open-vs-previous-close move that splits a series.
    pub price_jump_threshold: f64,
    pub max_consecutive_illiquid: usize,
    pub max_consecutive_stagnant: usize,
    /// A bar is illiquid when `volume <= liquidity_epsilon`.
    pub liquidity_epsilon: f64,
}

impl CleaningParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_length < 1 {
            return Err(Error::config("min_length", "must be >= 1"));
        }
        if !(self.price_jump_threshold > 0.0) {
            return Err(Error::config("price_jump_threshold", "must be > 0"));
        }
        if !(self.liquidity_epsilon >= 0.0) {
            return Err(Error::config("liquidity_epsilon", "must be >= 0"));
        }
        Ok(())
    }
}

pub fn default_cleaning_params(freq: Frequency) -> CleaningParams {
    let (min_length, jump, illiquid, stagnant) = match freq {
        Frequency::Min1 => (2048, 0.10, 15, 45),
        Frequency::Min5 => (1024, 0.15, 3, 10),
        Frequency::Min10 => (512, 0.15, 3, 6),
        Frequency::Min15 => (512, 0.15, 2, 5),
        Frequency::Min20 => (512, 0.15, 2, 5),
        Frequency::Min30 => (512, 0.20, 2, 3),
        Frequency::Min40 => (256, 0.20, 1, 3),
        Frequency::Min60 => (256, 0.20, 1, 3),
        Frequency::Hour2 => (128, 0.25, 1, 3),
        Frequency::Hour4 => (128, 0.25, 1, 3),
        Frequency::Daily => (128, 0.30, 1, 3),
        Frequency::Weekly => (16, 0.50, 0, 2),
    };
    CleaningParams {
        min_length,
        price_jump_threshold: jump,
        max_consecutive_illiquid: illiquid,
        max_consecutive_stagnant: stagnant,
        liquidity_epsilon: 0.0,
    }
}

/// Maximal runs of bars whose four prices are all finite.
pub fn split_on_missing_prices(series: &KLineSeries) -> Vec<Segment> {
    runs(series.len(), |i| series.records[i].prices_finite())
        .into_iter()
        .map(|(s, e)| Segment::new(series, s, e))
        .collect()
}

/// Zero-fills non-finite volume/amount and clears their presence flags.
pub fn impute_volume(series: &KLineSeries) -> KLineSeries {
    let mut out = series.clone();
    for r in &mut out.records {
        if !r.volume.is_finite() {
            r.volume = 0.0;
            r.volume_present = false;
        }
        if !r.amount.is_finite() {
            r.amount = 0.0;
            r.amount_present = false;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpPartition {
    pub segments: Vec<Segment>,
    /// Indices `t` where `close[t-1] == 0` forced a split.
    pub zero_close_warnings: Vec<usize>,
}

/// Whether bar `t` starts a new segment because of a price jump from bar
/// `t - 1`. A zero previous close always splits.
fn is_jump(series: &KLineSeries, t: usize, threshold: f64) -> bool {
    let prev = series.records[t - 1].close;
    if prev == 0.0 {
        return true;
    }
    (series.records[t].open / prev - 1.0).abs() > threshold
}

pub fn partition_by_price_jumps(series: &KLineSeries, params: &CleaningParams) -> JumpPartition {
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    let mut start = 0;
    for t in 1..series.len() {
        if series.records[t - 1].close == 0.0 {
            warnings.push(t);
        }
        if is_jump(series, t, params.price_jump_threshold) {
            segments.push(Segment::new(series, start, t));
            start = t;
        }
    }
    if !series.is_empty() {
        segments.push(Segment::new(series, start, series.len()));
    }
    JumpPartition {
        segments,
        zero_close_warnings: warnings,
    }
}

fn round10(x: f64) -> f64 {
    (x * 1e10).round()
}

/// Per-bar invalid flags within one jump segment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentFlags {
    pub illiquid: Vec<bool>,
    pub stagnant: Vec<bool>,
}

/// Flags runs of illiquid bars longer than the illiquid tolerance and runs of
/// stagnant bars (close equal to the previous close) longer than the stagnant
/// tolerance, within `[seg.start, seg.end)`.
pub fn flag_segment(series: &KLineSeries, seg: &Segment, params: &CleaningParams) -> SegmentFlags {
    let recs = &series.records[seg.start..seg.end];
    let illiquid: Vec<bool> = recs.iter().map(|r| r.volume <= params.liquidity_epsilon).collect();
    let stagnant: Vec<bool> = (0..recs.len())
        .map(|i| i > 0 && round10(recs[i].close) == round10(recs[i - 1].close))
        .collect();
    SegmentFlags {
        illiquid: flag_long_runs(&illiquid, params.max_consecutive_illiquid),
        stagnant: flag_long_runs(&stagnant, params.max_consecutive_stagnant),
    }
}

fn flag_long_runs(hits: &[bool], max_run: usize) -> Vec<bool> {
    let mut out = vec![false; hits.len()];
    for (s, e) in runs(hits.len(), |i| hits[i]) {
        if e - s > max_run {
            out[s..e].iter_mut().for_each(|f| *f = true);
        }
    }
    out
}

/// Maximal `[start, end)` runs of indices satisfying `pred`.
fn runs(n: usize, pred: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..n {
        match (pred(i), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

/// Why bars were removed by [`clean_series`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropHistogram {
    pub missing_price: usize,
    pub illiquid: usize,
    /// Stagnant and not also illiquid.
    pub stagnant: usize,
    pub short_segment: usize,
}

impl DropHistogram {
    pub fn total(&self) -> usize {
        self.missing_price + self.illiquid + self.stagnant + self.short_segment
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub segments: Vec<Segment>,
    pub drops: DropHistogram,
    pub zero_close_warnings: Vec<usize>,
}

/// Low-quality segment filtering on a series without missing prices:
/// split on price jumps, flag over-long illiquid and stagnant runs inside each
/// piece, split on the flags, and keep pieces of at least `min_length` bars.
pub fn filter_segments(series: &KLineSeries, params: &CleaningParams) -> Vec<Segment> {
    filter_segments_detailed(series, params).segments
}

pub fn filter_segments_detailed(series: &KLineSeries, params: &CleaningParams) -> FilterOutcome {
    let partition = partition_by_price_jumps(series, params);
    let mut segments = Vec::new();
    let mut drops = DropHistogram::default();
    for seg in &partition.segments {
        let flags = flag_segment(series, seg, params);
        let invalid = |i: usize| flags.illiquid[i] || flags.stagnant[i];
        drops.illiquid += flags.illiquid.iter().filter(|&&f| f).count();
        drops.stagnant += (0..seg.len())
            .filter(|&i| flags.stagnant[i] && !flags.illiquid[i])
            .count();
        for (s, e) in runs(seg.len(), |i| !invalid(i)) {
            if e - s >= params.min_length {
                segments.push(Segment::new(series, seg.start + s, seg.start + e));
            } else {
                drops.short_segment += e - s;
            }
        }
    }
    FilterOutcome {
        segments,
        drops,
        zero_close_warnings: partition.zero_close_warnings,
    }
}

/// Full cleaning of a raw series: missing-price split, volume imputation, then
/// [`filter_segments`] on every missing-free piece. Returned segments index the
/// imputed series, which is returned alongside.
pub fn clean_series(series: &KLineSeries, params: &CleaningParams) -> (KLineSeries, FilterOutcome) {
    let imputed = impute_volume(series);
    let mut outcome = FilterOutcome {
        segments: Vec::new(),
        drops: DropHistogram::default(),
        zero_close_warnings: Vec::new(),
    };
    let pieces = split_on_missing_prices(&imputed);
    let covered: usize = pieces.iter().map(Segment::len).sum();
    outcome.drops.missing_price = imputed.len() - covered;
    for piece in pieces {
        let sub = KLineSeries {
            asset_id: imputed.asset_id.clone(),
            frequency: imputed.frequency,
            records: imputed.records[piece.start..piece.end].to_vec(),
        };
        let r = filter_segments_detailed(&sub, params);
        outcome.segments.extend(r.segments.into_iter().map(|mut s| {
            s.start += piece.start;
            s.end += piece.start;
            s
        }));
        outcome.drops.illiquid += r.drops.illiquid;
        outcome.drops.stagnant += r.drops.stagnant;
        outcome.drops.short_segment += r.drops.short_segment;
        outcome
            .zero_close_warnings
            .extend(r.zero_close_warnings.into_iter().map(|i| i + piece.start));
    }
    (imputed, outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Per-channel mean and population standard deviation over `window`.
/// Imputed (absent) volume/amount entries are left out of their channel's
/// statistics.
pub fn fit_normalization(window: &KLineSeries) -> Result<NormalizationStats> {
    if window.len() < 2 {
        return Err(Error::Precondition(format!(
            "normalization window needs at least 2 bars, got {}",
            window.len()
        )));
    }
    let mut mean = [0.0; CHANNELS];
    let mut std = [STD_EPSILON; CHANNELS];
    for d in 0..CHANNELS {
        let vals: Vec<f64> = window
            .records
            .iter()
            .filter(|r| present(r, d))
            .map(|r| r.to_array()[d])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[d] = m;
        std[d] = var.sqrt().max(STD_EPSILON);
    }
    Ok(NormalizationStats { mean, std })
}

fn present(r: &crate::kline::KLineRecord, d: usize) -> bool {
    match d {
        4 => r.volume_present,
        5 => r.amount_present,
        _ => true,
    }
}

/// `clip((x - mean) / std, -5, 5)`; absent volume/amount map to 0.
pub fn normalize(window: &KLineSeries, stats: &NormalizationStats) -> Matrix {
    window
        .records
        .iter()
        .map(|r| {
            let x = r.to_array();
            let mut z = [0.0; CHANNELS];
            for d in 0..CHANNELS {
                if present(r, d) {
                    z[d] = ((x[d] - stats.mean[d]) / stats.std[d]).clamp(-CLIP, CLIP);
                }
            }
            z
        })
        .collect()
}

/// `x = z * std + mean`. Values that were clipped do not round-trip.
pub fn denormalize(z: &[[f64; CHANNELS]], stats: &NormalizationStats) -> Matrix {
    z.iter()
        .map(|row| {
            let mut x = [0.0; CHANNELS];
            for d in 0..CHANNELS {
                x[d] = row[d] * stats.std[d] + stats.mean[d];
            }
            x
        })
        .collect()
}

/// Windows of `len` bars every `stride` bars, each z-scored with its own
/// statistics.
pub fn normalized_windows(series: &KLineSeries, len: usize, stride: usize) -> Result<Vec<Matrix>> {
    if len < 2 || stride == 0 {
        return Err(Error::config("window", format!("length {len} / stride {stride}")));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= series.len() {
        let w = crate::kline::slice(series, &Segment::new(series, start, start + len))?;
        let stats = fit_normalization(&w)?;
        out.push(normalize(&w, &stats));
        start += stride;
    }
    Ok(out)
}

/// Zeroes the volume and amount channels of whole samples with probability
/// `rate` each. Returns how many samples were zeroed.
pub fn volume_dropout<R: Rng + ?Sized>(batch: &mut [Matrix], rate: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("volume_dropout", format!("rate {rate} outside [0, 1]")));
    }
    let mut dropped = 0;
    for sample in batch.iter_mut() {
        if rng.random::<f64>() < rate {
            for row in sample.iter_mut() {
                row[4] = 0.0;
                row[5] = 0.0;
            }
            dropped += 1;
        }
    }
    Ok(dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssetClass {
    Equity,
    Crypto,
    Futures,
    Forex,
    Index,
}

impl std::str::FromStr for AssetClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "equity" => AssetClass::Equity,
            "crypto" => AssetClass::Crypto,
            "futures" => AssetClass::Futures,
            "forex" => AssetClass::Forex,
            "index" => AssetClass::Index,
            other => return Err(Error::config("asset_class", format!("unknown class {other:?}"))),
        })
    }
}

/// Per-class sampling multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMultipliers {
    pub equity: f64,
    pub crypto: f64,
    pub futures: f64,
    pub forex: f64,
    pub index: f64,
}

impl Default for ClassMultipliers {
    fn default() -> Self {
        ClassMultipliers {
            equity: 1.0,
            crypto: 2.0,
            futures: 2.0,
            forex: 2.0,
            index: 2.0,
        }
    }
}

impl ClassMultipliers {
    pub fn get(&self, class: AssetClass) -> f64 {
        match class {
            AssetClass::Equity => self.equity,
            AssetClass::Crypto => self.crypto,
            AssetClass::Futures => self.futures,
            AssetClass::Forex => self.forex,
            AssetClass::Index => self.index,
        }
    }
}

/// Per-segment sampling weights proportional to the class multiplier,
/// normalized to sum to 1.
pub fn rebalance_weights(catalog: &[(AssetClass, Segment)], multipliers: &ClassMultipliers) -> Result<Vec<f64>> {
    if catalog.is_empty() {
        return Err(Error::Precondition("empty segment catalog".into()));
    }
    let raw: Vec<f64> = catalog.iter().map(|(c, _)| multipliers.get(*c)).collect();
    if raw.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("multipliers", "must be non-negative"));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("multipliers", "all catalog weights are zero"));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}
