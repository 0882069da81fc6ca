//! Sampling, incremental generation and Monte Carlo forecasting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ar::{sample_index, ArModel, TemporalFeatures, TokenSequence};
use crate::kline::{validate_series, KLineSeries, CHANNELS};
use crate::nn::{RowLayout, Session};
use crate::pipeline::{denormalize, fit_normalization, normalize, Matrix};
use crate::tokenizer::{DecodeMode, TokenPair, Tokenizer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn forecasting(seed: u64) -> Self {
        SamplingConfig {
            temperature: 0.6,
            top_p: 0.9,
            n_samples: 10,
            seed,
        }
    }

    pub fn volatility(seed: u64) -> Self {
        SamplingConfig {
            temperature: 0.9,
            top_p: 0.9,
            n_samples: 1,
            seed,
        }
    }

    pub fn generation(seed: u64) -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.95,
            n_samples: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "sampling.temperature",
                format!("{} is not positive", self.temperature),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config(
                "sampling.top_p",
                format!("{} outside (0, 1]", self.top_p),
            ));
        }
        if self.n_samples == 0 {
            return Err(Error::config("sampling.n_samples", "must be at least 1"));
        }
        Ok(())
    }

    /// Generator for rollout `i`: the master seed with stream `i`, so each
    /// rollout is independent of how many others run or in what order.
    pub fn rollout_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }
}

/// `softmax(logits / t)`, max-subtracted.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("temperature", format!("{t} is not positive")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Keeps the smallest probability-descending prefix (ties by ascending index)
/// whose mass reaches `p`, zeroes the rest and renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    let mut acc = 0.0;
    for (n, &i) in order.iter().enumerate() {
        acc += probs[i];
        if acc >= p {
            keep = n + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    let mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
    for &i in &order[..keep] {
        out[i] = probs[i] / mass;
    }
    out
}

fn draw<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> Result<u32> {
    let probs = apply_temperature(logits, cfg.temperature)?;
    let probs = nucleus_filter(&probs, cfg.top_p);
    Ok(sample_index(&probs, rng.random::<f64>()) as u32)
}

/// Calendar features for the `h` bars after `last_timestamp`.
pub fn future_temporal(last_timestamp: i64, frequency: crate::kline::Frequency, h: usize) -> Vec<TemporalFeatures> {
    future_timestamps(last_timestamp, frequency, h)
        .into_iter()
        .map(|ts| TemporalFeatures::from_timestamp(ts, frequency))
        .collect()
}

pub fn future_timestamps(last_timestamp: i64, frequency: crate::kline::Frequency, h: usize) -> Vec<i64> {
    (1..=h as i64)
        .map(|i| last_timestamp + i * frequency.bar_seconds())
        .collect()
}

/// Coarse logits for the last context position, plus the session state
/// needed to continue from it.
struct Decoder<'m> {
    model: &'m ArModel,
    session: Session,
    cache: Vec<crate::nn::KvCache>,
    history: TokenSequence,
    hidden: Option<kline_tensor::Var>,
}

impl<'m> Decoder<'m> {
    fn start(model: &'m ArModel, context: &TokenSequence) -> Result<Self> {
        let mut d = Decoder {
            model,
            session: Session::eval(&model.params),
            cache: model.empty_cache(),
            history: context.clone(),
            hidden: None,
        };
        d.refill()?;
        Ok(d)
    }

    /// Drops all but the last `max_context` tokens and rebuilds the cache.
    fn refill(&mut self) -> Result<()> {
        let max = self.model.cfg.max_context;
        if self.history.len() > max {
            let cut = self.history.len() - max;
            self.history.tokens.drain(..cut);
            self.history.temporal.drain(..cut);
        }
        self.cache = self.model.empty_cache();
        let s = &mut self.session;
        let fused = self.model.fuse(s, &self.history.tokens, &self.history.temporal)?;
        let h = self.model.backbone_cached(s, fused, &mut self.cache)?;
        let last = s.g.shape(h)[0] - 1;
        self.hidden = Some(s.g.narrow(h, 0, last, 1)?);
        Ok(())
    }

    fn push(&mut self, token: TokenPair, temporal: TemporalFeatures) -> Result<()> {
        self.history.tokens.push(token);
        self.history.temporal.push(temporal);
        if self.cache.first().map_or(0, |c| c.len()) >= self.model.cfg.max_context {
            return self.refill();
        }
        let s = &mut self.session;
        let fused = self.model.fuse(s, &[token], &[temporal])?;
        self.hidden = Some(self.model.backbone_cached(s, fused, &mut self.cache)?);
        Ok(())
    }

    fn hidden(&self) -> kline_tensor::Var {
        self.hidden.expect("decoder state is filled on start")
    }

    fn coarse_logits(&mut self) -> Result<Vec<f64>> {
        let h = self.hidden();
        let l = self.model.coarse_logits(&mut self.session, h)?;
        Ok(self.session.value(l).data().to_vec())
    }

    fn fine_logits(&mut self, coarse: u32) -> Result<Vec<f64>> {
        let h = self.hidden();
        let l = self.model.fine_logits(&mut self.session, h, &[coarse])?;
        Ok(self.session.value(l).data().to_vec())
    }
}

/// Samples `future.len()` token pairs after `context`, drawing the coarse
/// subtoken first and the fine subtoken conditioned on it. Uses exactly two
/// uniform draws from `rng` per generated pair.
pub fn generate<R: Rng + ?Sized>(
    model: &ArModel,
    context: &TokenSequence,
    future: &[TemporalFeatures],
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<TokenPair>> {
    sampling.validate()?;
    if context.is_empty() {
        return Err(Error::Precondition(
            "generation needs at least one context token".into(),
        ));
    }
    let mut dec = Decoder::start(model, context)?;
    let mut out = Vec::with_capacity(future.len());
    for (i, &temporal) in future.iter().enumerate() {
        let cl = dec.coarse_logits()?;
        let coarse = draw(&cl, sampling, rng)?;
        let fl = dec.fine_logits(coarse)?;
        let fine = draw(&fl, sampling, rng)?;
        let pair = TokenPair { coarse, fine };
        out.push(pair);
        if i + 1 < future.len() {
            dec.push(pair, temporal)?;
        }
    }
    Ok(out)
}

/// Coarse logits after `context` computed without a cache, for checking the
/// incremental path.
pub fn coarse_logits_from_scratch(model: &ArModel, context: &TokenSequence) -> Result<Vec<f64>> {
    let mut s = Session::eval(&model.params);
    let fused = model.fuse(&mut s, &context.tokens, &context.temporal)?;
    let h = model.backbone(&mut s, fused, &RowLayout::single(context.len()))?;
    let last = s.g.shape(h)[0] - 1;
    let h = s.g.narrow(h, 0, last, 1)?;
    let l = model.coarse_logits(&mut s, h)?;
    Ok(s.value(l).data().to_vec())
}

/// Coarse logits after `context` followed by `appended`, fed one token at a
/// time through the cache.
pub fn coarse_logits_incremental(
    model: &ArModel,
    context: &TokenSequence,
    appended: &TokenSequence,
) -> Result<Vec<f64>> {
    let mut dec = Decoder::start(model, context)?;
    for (&t, &f) in appended.tokens.iter().zip(&appended.temporal) {
        dec.push(t, f)?;
    }
    dec.coarse_logits()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub timestamps: Vec<i64>,
    /// Denormalized `[H x 6]` rollouts.
    pub rollouts: Vec<Matrix>,
    pub ensemble_mean: Matrix,
    pub token_rollouts: Vec<Vec<TokenPair>>,
}

pub fn ensemble_mean(rollouts: &[Matrix]) -> Matrix {
    let Some(first) = rollouts.first() else {
        return Vec::new();
    };
    let n = rollouts.len() as f64;
    (0..first.len())
        .map(|t| {
            let mut row = [0.0; CHANNELS];
            for r in rollouts {
                for (acc, v) in row.iter_mut().zip(&r[t]) {
                    *acc += v;
                }
            }
            row.map(|v| v / n)
        })
        .collect()
}

/// Normalizes and tokenizes `window`, draws `n_samples` independent rollouts
/// of `h` bars and decodes them back to price space.
pub fn forecast(
    window: &KLineSeries,
    tokenizer: &Tokenizer,
    model: &ArModel,
    h: usize,
    sampling: &SamplingConfig,
) -> Result<ForecastResult> {
    sampling.validate()?;
    if h == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    if tokenizer.cfg.bsq.k != model.cfg.k {
        return Err(Error::config(
            "model.k",
            format!("tokenizer k = {} but model k = {}", tokenizer.cfg.bsq.k, model.cfg.k),
        ));
    }
    if let Some(v) = validate_series(window).first() {
        return Err(Error::Data(format!("bar {} violates {}", v.index, v.rule)));
    }
    let stats = fit_normalization(window)?;
    let z = normalize(window, &stats);
    let (tokens, _) = tokenizer.encode(&z)?;
    let temporal = window
        .records
        .iter()
        .map(|r| TemporalFeatures::from_timestamp(r.timestamp, window.frequency))
        .collect();
    let context = TokenSequence::new(tokens, temporal)?;
    let last_ts = window.records.last().map(|r| r.timestamp).unwrap_or_default();
    let timestamps = future_timestamps(last_ts, window.frequency, h);
    let future = future_temporal(last_ts, window.frequency, h);

    let rollouts: Vec<(Vec<TokenPair>, Matrix)> = (0..sampling.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sampling.rollout_rng(i);
            let generated = generate(model, &context, &future, sampling, &mut rng)?;
            let mut all = context.tokens.clone();
            all.extend_from_slice(&generated);
            let decoded = tokenizer.decode(&all, DecodeMode::Full)?;
            let x = denormalize(&decoded[decoded.len() - h..], &stats);
            Ok((generated, x))
        })
        .collect::<Result<_>>()?;
    let (token_rollouts, rollouts): (Vec<_>, Vec<_>) = rollouts.into_iter().unzip();
    Ok(ForecastResult {
        timestamps,
        ensemble_mean: ensemble_mean(&rollouts),
        rollouts,
        token_rollouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleRow {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// For each ensemble size, runs `trials` independent forecasts and reports the
/// mean and sample standard deviation of the horizon-averaged ensemble close.
pub fn ensemble_variance_study(
    window: &KLineSeries,
    tokenizer: &Tokenizer,
    model: &ArModel,
    h: usize,
    n_list: &[usize],
    trials: usize,
    base: &SamplingConfig,
) -> Result<Vec<EnsembleRow>> {
    if trials < 2 {
        return Err(Error::config("trials", "need at least 2 trials for a dispersion"));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let mut metrics = Vec::with_capacity(trials);
        for trial in 0..trials {
            let seed = base
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((ni * 10_007 + trial) as u64);
            let cfg = SamplingConfig {
                n_samples: n,
                seed,
                ..*base
            };
            let f = forecast(window, tokenizer, model, h, &cfg)?;
            let close = f.ensemble_mean.iter().map(|r| r[3]).sum::<f64>() / h as f64;
            metrics.push(close);
        }
        let m = metrics.iter().sum::<f64>() / trials as f64;
        let var = metrics.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (trials - 1) as f64;
        rows.push(EnsembleRow {
            n,
            mean: m,
            std: var.sqrt(),
        });
    }
    Ok(rows)
}

pub fn ensemble_rows_csv(rows: &[EnsembleRow]) -> String {
    let mut out = String::from("n_samples,metric_mean,metric_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.n, r.mean, r.std));
    }
    out
}
