//! Forecast metrics, synthetic-data protocols and a top-k/drop-n backtest.

use std::fmt::Write as _;

use kline_tensor::{ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{RecurrentCellConfig, RecurrentHead, Session};
use crate::train::{OptimConfig, Optimizer};
use crate::{Error, Result};

/// Trading days per year for annualization.
pub const TRADING_DAYS: f64 = 252.0;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson_ic(pred: &[f64], actual: &[f64]) -> Result<Option<f64>> {
    if pred.len() != actual.len() || pred.len() < 2 {
        return Err(Error::Precondition(format!(
            "correlation needs equal lengths of at least 2, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    let (mp, ma) = (mean(pred), mean(actual));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, a) in pred.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        sxy += dp * da;
        sxx += dp * dp;
        syy += da * da;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks for ties.
pub fn rank_ic(pred: &[f64], actual: &[f64]) -> Result<Option<f64>> {
    if pred.len() != actual.len() || pred.len() < 2 {
        return pearson_ic(pred, actual);
    }
    pearson_ic(&average_ranks(pred), &average_ranks(actual))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceSeriesMetrics {
    pub ic: Option<f64>,
    pub rank_ic: Option<f64>,
    /// Channels whose IC / RankIC was defined.
    pub ic_channels: usize,
    pub rank_ic_channels: usize,
}

/// Per-channel IC and RankIC over the horizon for open, high, low and close,
/// averaged over the channels where they are defined.
pub fn price_series_metrics(pred: &[[f64; 4]], actual: &[[f64; 4]]) -> Result<PriceSeriesMetrics> {
    if pred.len() != actual.len() {
        return Err(Error::Precondition(format!(
            "forecast has {} rows but actual has {}",
            pred.len(),
            actual.len()
        )));
    }
    let mut ics = Vec::new();
    let mut ranks = Vec::new();
    for c in 0..4 {
        let p: Vec<f64> = pred.iter().map(|r| r[c]).collect();
        let a: Vec<f64> = actual.iter().map(|r| r[c]).collect();
        ics.extend(pearson_ic(&p, &a)?);
        ranks.extend(rank_ic(&p, &a)?);
    }
    let avg = |v: &[f64]| if v.is_empty() { None } else { Some(mean(v)) };
    Ok(PriceSeriesMetrics {
        ic: avg(&ics),
        rank_ic: avg(&ranks),
        ic_channels: ics.len(),
        rank_ic_channels: ranks.len(),
    })
}

/// `forecast / last_close - 1`.
pub fn predicted_return(last_close: f64, forecast_close: f64) -> Result<f64> {
    if !(last_close > 0.0) {
        return Err(Error::Domain(format!("reference price {last_close} is not positive")));
    }
    Ok(forecast_close / last_close - 1.0)
}

/// `(mean(forecast closes) - p_t) / p_t`.
pub fn h_day_signal(last_close: f64, forecast_closes: &[f64]) -> Result<f64> {
    if !(last_close > 0.0) {
        return Err(Error::Domain(format!("reference price {last_close} is not positive")));
    }
    if forecast_closes.is_empty() {
        return Err(Error::Precondition("signal needs at least one forecast".into()));
    }
    Ok((mean(forecast_closes) - last_close) / last_close)
}

/// Sum of squared log returns along the path.
pub fn realized_volatility(closes: &[f64]) -> Result<f64> {
    if closes.len() < 2 {
        return Err(Error::Precondition(
            "realized volatility needs at least 2 prices".into(),
        ));
    }
    if let Some(p) = closes.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Domain(format!("non-positive price {p}")));
    }
    Ok(closes
        .windows(2)
        .map(|w| {
            let r = w[1].ln() - w[0].ln();
            r * r
        })
        .sum())
}

/// Mean absolute error and `1 - SS_res / SS_tot`; R² is `None` when the
/// actual values are constant.
pub fn mae_r2(pred: &[f64], actual: &[f64]) -> Result<(f64, Option<f64>)> {
    if pred.len() != actual.len() || pred.len() < 2 {
        return Err(Error::Precondition("MAE/R² need equal lengths of at least 2".into()));
    }
    let mae = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / pred.len() as f64;
    let ma = mean(actual);
    let ss_tot: f64 = actual.iter().map(|a| (a - ma) * (a - ma)).sum();
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p) * (a - p)).sum();
    let r2 = if ss_tot == 0.0 {
        None
    } else {
        Some(1.0 - ss_res / ss_tot)
    };
    Ok((mae, r2))
}

/// Training settings for the small recurrent evaluation networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl ProbeConfig {
    pub fn discriminator() -> Self {
        ProbeConfig {
            hidden: 32,
            epochs: 20,
            batch_size: 64,
            lr: 5e-4,
        }
    }

    pub fn forecaster() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
        }
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            peak_lr: self.lr,
            weight_decay: 0.0,
            warmup_steps: 0,
            clip_norm: Some(5.0),
            ..OptimConfig::default()
        }
    }
}

type Sequence = Vec<Vec<f64>>;

fn check_sequences(sets: &[&[Sequence]]) -> Result<(usize, usize)> {
    let first = sets
        .iter()
        .find_map(|s| s.first())
        .ok_or_else(|| Error::Precondition("empty sequence set".into()))?;
    let (t, d) = (first.len(), first.first().map_or(0, Vec::len));
    if t == 0 || d == 0 {
        return Err(Error::Precondition("sequences must be non-empty".into()));
    }
    for set in sets {
        if set.is_empty() {
            return Err(Error::Precondition("empty sequence set".into()));
        }
        if set.iter().any(|s| s.len() != t || s.iter().any(|r| r.len() != d)) {
            return Err(Error::Precondition("all sequences must share length and width".into()));
        }
    }
    Ok((t, d))
}

/// Mini-batch training of a recurrent head on `(sequence, target)` pairs with
/// either a binary cross-entropy or a mean squared error objective.
fn fit_probe(
    head: &RecurrentHead,
    params: &mut ParamSet,
    data: &[(&Sequence, Vec<f64>)],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(cfg.optim(), params, total.max(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut s = Session::grad_eval(params);
            let seqs: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| data[i].0.as_slice()).collect();
            let steps = RecurrentHead::steps_from_sequences(&mut s, &seqs)?;
            let y = head.forward(&mut s, &steps)?;
            let width = data[chunk[0]].1.len();
            let target: Vec<f64> = chunk.iter().flat_map(|&i| data[i].1.iter().copied()).collect();
            let target = s.constant(Tensor::new(vec![chunk.len(), width], target)?);
            let loss = if head.sigmoid {
                // -[t log y + (1 - t) log(1 - y)], with y kept away from 0 and 1.
                let eps = 1e-12;
                let ly = s.g.add_scalar(y, eps);
                let ly = s.g.log(ly);
                let a = s.g.mul(target, ly)?;
                let one_minus = s.g.neg(y);
                let one_minus = s.g.add_scalar(one_minus, 1.0 + eps);
                let lq = s.g.log(one_minus);
                let nt = s.g.neg(target);
                let nt = s.g.add_scalar(nt, 1.0);
                let b = s.g.mul(nt, lq)?;
                let sum = s.g.add(a, b)?;
                let m = s.g.mean(sum);
                s.g.neg(m)
            } else {
                let d = s.g.sub(y, target)?;
                let d = s.g.square(d);
                s.g.mean(d)
            };
            if !s.value(loss).item().is_finite() {
                return Err(Error::NonFinite {
                    step,
                    component: "evaluation probe".into(),
                });
            }
            s.backward(loss)?;
            opt.step(params, s.grads(), step);
            step += 1;
        }
    }
    Ok(())
}

fn predict_probe(head: &RecurrentHead, params: &ParamSet, seqs: &[&Sequence]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(256) {
        let mut s = Session::eval(params);
        let refs: Vec<&[Vec<f64>]> = chunk.iter().map(|q| q.as_slice()).collect();
        let steps = RecurrentHead::steps_from_sequences(&mut s, &refs)?;
        let y = head.forward(&mut s, &steps)?;
        out.extend(s.value(y).to_rows());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminativeResult {
    /// Raw test accuracy of the real-vs-synthetic classifier.
    pub accuracy: f64,
    /// `|0.5 - accuracy|`; near 0 means the sets are hard to tell apart.
    pub score: f64,
    pub test_size: usize,
}

/// Trains the recurrent classifier on half of each set (label 1 = real) and
/// reports its accuracy on the other half.
pub fn discriminative_score(
    real: &[Sequence],
    synthetic: &[Sequence],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<DiscriminativeResult> {
    let (_, d) = check_sequences(&[real, synthetic])?;
    if real.len() < 2 || synthetic.len() < 2 {
        return Err(Error::Precondition(
            "each set needs at least 2 sequences to split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |set: &[Sequence], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let half = set.len() / 2;
        (idx[..half].to_vec(), idx[half..].to_vec())
    };
    let (real_train, real_test) = split(real, &mut rng);
    let (syn_train, syn_test) = split(synthetic, &mut rng);

    let mut params = ParamSet::new();
    let cell = RecurrentCellConfig {
        input_dim: d,
        hidden_dim: cfg.hidden,
    };
    let head = RecurrentHead::classifier(&mut params, "disc", &cell, &mut rng);
    let train: Vec<(&Sequence, Vec<f64>)> = real_train
        .iter()
        .map(|&i| (&real[i], vec![1.0]))
        .chain(syn_train.iter().map(|&i| (&synthetic[i], vec![0.0])))
        .collect();
    fit_probe(&head, &mut params, &train, cfg, &mut rng)?;

    let test: Vec<(&Sequence, bool)> = real_test
        .iter()
        .map(|&i| (&real[i], true))
        .chain(syn_test.iter().map(|&i| (&synthetic[i], false)))
        .collect();
    let seqs: Vec<&Sequence> = test.iter().map(|(s, _)| *s).collect();
    let preds = predict_probe(&head, &params, &seqs)?;
    let correct = preds
        .iter()
        .zip(&test)
        .filter(|(p, (_, label))| (p[0] >= 0.5) == *label)
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    Ok(DiscriminativeResult {
        accuracy,
        score: (0.5 - accuracy).abs(),
        test_size: test.len(),
    })
}

/// Look-back / horizon lengths of the usefulness protocol per frequency.
pub fn tstr_windows(frequency: crate::kline::Frequency) -> Option<(usize, usize)> {
    match frequency {
        crate::kline::Frequency::Min15 => Some((80, 16)),
        crate::kline::Frequency::Daily => Some((30, 5)),
        _ => None,
    }
}

/// Splits a price path into `(input, target)` windows, both z-scored with
/// the look-back's mean and standard deviation.
fn forecasting_windows(series: &[f64], lookback: usize, horizon: usize) -> Vec<(Sequence, Vec<f64>)> {
    let span = lookback + horizon;
    if series.len() < span {
        return Vec::new();
    }
    (0..=series.len() - span)
        .step_by(horizon)
        .map(|start| {
            let past = &series[start..start + lookback];
            let m = mean(past);
            let sd = (past.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / lookback as f64)
                .sqrt()
                .max(1e-8);
            let input = past.iter().map(|v| vec![(v - m) / sd]).collect();
            let target = series[start + lookback..start + span]
                .iter()
                .map(|v| (v - m) / sd)
                .collect();
            (input, target)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TstrResult {
    pub ic: Option<f64>,
    pub rank_ic: Option<f64>,
    pub train_windows: usize,
    pub test_windows: usize,
}

/// Train-on-synthetic, test-on-real: fits the recurrent forecaster on
/// windows cut from `synthetic` price paths and scores its horizon forecasts
/// on windows from `real` paths. IC and RankIC are pooled over every
/// (window, horizon step) pair in look-back-normalized units.
pub fn tstr(
    synthetic: &[Vec<f64>],
    real: &[Vec<f64>],
    lookback: usize,
    horizon: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<TstrResult> {
    if lookback < 2 || horizon == 0 {
        return Err(Error::config(
            "tstr",
            "look-back must be at least 2 and horizon at least 1",
        ));
    }
    let train: Vec<(Sequence, Vec<f64>)> = synthetic
        .iter()
        .flat_map(|s| forecasting_windows(s, lookback, horizon))
        .collect();
    let test: Vec<(Sequence, Vec<f64>)> = real
        .iter()
        .flat_map(|s| forecasting_windows(s, lookback, horizon))
        .collect();
    if train.is_empty() || test.len() < 2 {
        return Err(Error::Precondition(format!(
            "insufficient data: {} synthetic and {} real windows of length {}",
            train.len(),
            test.len(),
            lookback + horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cell = RecurrentCellConfig {
        input_dim: 1,
        hidden_dim: cfg.hidden,
    };
    let head = RecurrentHead::regressor(&mut params, "tstr", &cell, horizon, &mut rng);
    let data: Vec<(&Sequence, Vec<f64>)> = train.iter().map(|(x, y)| (x, y.clone())).collect();
    fit_probe(&head, &mut params, &data, cfg, &mut rng)?;
    let seqs: Vec<&Sequence> = test.iter().map(|(x, _)| x).collect();
    let preds = predict_probe(&head, &params, &seqs)?;
    let p: Vec<f64> = preds.into_iter().flatten().collect();
    let a: Vec<f64> = test.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    Ok(TstrResult {
        ic: pearson_ic(&p, &a)?,
        rank_ic: rank_ic(&p, &a)?,
        train_windows: train.len(),
        test_windows: test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestConfig {
    /// Portfolio size.
    pub k: usize,
    /// Maximum sells per day.
    pub n: usize,
    pub min_hold: usize,
    /// Proportional cost charged on each trade's notional.
    pub cost: f64,
    pub horizon: usize,
    pub initial_capital: f64,
}

impl BacktestConfig {
    pub fn new(k: usize, n: usize) -> Self {
        BacktestConfig {
            k,
            n,
            min_hold: 5,
            cost: 0.0015,
            horizon: 10,
            initial_capital: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k < self.n {
            return Err(Error::config(
                "backtest",
                format!("need k >= n >= 1, got k={} n={}", self.k, self.n),
            ));
        }
        if !(0.0..1.0).contains(&self.cost) {
            return Err(Error::config("backtest.cost", "must lie in [0, 1)"));
        }
        if !(self.initial_capital > 0.0) {
            return Err(Error::config("backtest.initial_capital", "must be positive"));
        }
        Ok(())
    }
}

/// One trading day of the ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerDay {
    pub day: usize,
    /// Value of the previous day's book at today's closes, before trading.
    pub value_before: f64,
    pub value_after: f64,
    /// Mark-to-market change of the previous day's positions.
    pub pnl: f64,
    pub costs: f64,
    pub bought: Vec<usize>,
    pub sold: Vec<usize>,
    pub cash: f64,
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquityPoint {
    pub date: String,
    pub portfolio_value: f64,
    pub benchmark_value: f64,
    pub excess_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub aer: f64,
    /// `None` when excess returns have zero dispersion.
    pub ir: Option<f64>,
    pub curve: Vec<EquityPoint>,
    pub ledger: Vec<LedgerDay>,
}

/// Daily top-k/drop-n simulation at closing prices.
///
/// Each day the book is marked to the close, assets with a signal are ranked
/// (descending, ties by ascending `asset_ids`), up to `n` held assets outside
/// the top `k` that have been held at least `min_hold` days are sold (lowest
/// rank first; holdings without a signal rank last), and the freed cash is
/// split equally across the best-ranked top-`k` assets not yet held until the
/// book holds `k` names. Every trade pays `cost` on its notional.
/// `benchmark_returns[d]` is the benchmark's return from day `d - 1` to `d`.
pub fn backtest_topk(
    signals: &[Vec<Option<f64>>],
    prices: &[Vec<f64>],
    benchmark_returns: &[f64],
    asset_ids: &[String],
    dates: &[String],
    cfg: &BacktestConfig,
) -> Result<BacktestResult> {
    cfg.validate()?;
    let days = prices.len();
    let assets = asset_ids.len();
    if days < 2 {
        return Err(Error::Precondition("backtest needs at least 2 days".into()));
    }
    if signals.len() != days || benchmark_returns.len() != days || dates.len() != days {
        return Err(Error::Data(format!(
            "calendar mismatch: {} price days, {} signal days, {} benchmark days, {} dates",
            days,
            signals.len(),
            benchmark_returns.len(),
            dates.len()
        )));
    }
    if let Some(d) = (0..days).find(|&d| prices[d].len() != assets || signals[d].len() != assets) {
        return Err(Error::Data(format!("day {d} does not cover all {assets} assets")));
    }
    if let Some(d) = (0..days).find(|&d| prices[d].iter().any(|p| !(*p > 0.0))) {
        return Err(Error::Data(format!("day {d} has a non-positive price")));
    }

    let mut cash = cfg.initial_capital;
    let mut shares = vec![0.0; assets];
    let mut bought_on: Vec<Option<usize>> = vec![None; assets];
    let mut ledger = Vec::with_capacity(days);
    let mut prev_value = cfg.initial_capital;

    for d in 0..days {
        let p = &prices[d];
        let book = |shares: &[f64], cash: f64| cash + shares.iter().zip(p).map(|(s, q)| s * q).sum::<f64>();
        let value_before = book(&shares, cash);
        let pnl = value_before - prev_value;

        let mut ranked: Vec<usize> = (0..assets).filter(|&a| signals[d][a].is_some()).collect();
        ranked.sort_by(|&a, &b| {
            let (sa, sb) = (signals[d][a].unwrap_or(0.0), signals[d][b].unwrap_or(0.0));
            sb.total_cmp(&sa).then_with(|| asset_ids[a].cmp(&asset_ids[b]))
        });
        let rank_of = |a: usize| ranked.iter().position(|&x| x == a).unwrap_or(usize::MAX);
        let target: Vec<usize> = ranked.iter().copied().take(cfg.k).collect();

        let mut candidates: Vec<usize> = (0..assets)
            .filter(|&a| bought_on[a].is_some() && !target.contains(&a))
            .filter(|&a| d - bought_on[a].unwrap_or(d) >= cfg.min_hold)
            .collect();
        candidates.sort_by(|&a, &b| {
            rank_of(b)
                .cmp(&rank_of(a))
                .then_with(|| asset_ids[b].cmp(&asset_ids[a]))
        });
        let sold: Vec<usize> = candidates.into_iter().take(cfg.n).collect();

        let mut costs = 0.0;
        for &a in &sold {
            let notional = shares[a] * p[a];
            let fee = notional * cfg.cost;
            cash += notional - fee;
            costs += fee;
            shares[a] = 0.0;
            bought_on[a] = None;
        }

        let held = bought_on.iter().filter(|b| b.is_some()).count();
        let open = cfg.k.saturating_sub(held);
        let bought: Vec<usize> = target
            .iter()
            .copied()
            .filter(|&a| bought_on[a].is_none())
            .take(open)
            .collect();
        if !bought.is_empty() {
            let budget = cash / bought.len() as f64;
            for &a in &bought {
                let qty = budget / (p[a] * (1.0 + cfg.cost));
                let fee = qty * p[a] * cfg.cost;
                shares[a] = qty;
                costs += fee;
                bought_on[a] = Some(d);
            }
            cash = 0.0;
        }

        let value_after = book(&shares, cash);
        ledger.push(LedgerDay {
            day: d,
            value_before,
            value_after,
            pnl,
            costs,
            bought,
            sold,
            cash,
            shares: shares.clone(),
        });
        prev_value = value_after;
    }

    let mut curve = Vec::with_capacity(days);
    let mut bench = cfg.initial_capital;
    let mut excess = Vec::with_capacity(days - 1);
    for d in 0..days {
        let mut ex = 0.0;
        if d > 0 {
            bench *= 1.0 + benchmark_returns[d];
            let r = ledger[d].value_after / ledger[d - 1].value_after - 1.0;
            ex = r - benchmark_returns[d];
            excess.push(ex);
        }
        curve.push(EquityPoint {
            date: dates[d].clone(),
            portfolio_value: ledger[d].value_after,
            benchmark_value: bench,
            excess_return: ex,
        });
    }
    let m = mean(&excess);
    let ir = if excess.len() >= 2 {
        let var = excess.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (excess.len() - 1) as f64;
        (var > 0.0).then(|| m / var.sqrt() * TRADING_DAYS.sqrt())
    } else {
        None
    };
    Ok(BacktestResult {
        aer: m * TRADING_DAYS,
        ir,
        curve,
        ledger,
    })
}

pub fn equity_curve_csv(curve: &[EquityPoint]) -> String {
    let mut out = String::from("date,portfolio_value,benchmark_value,excess_return\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.date, p.portfolio_value, p.benchmark_value, p.excess_return
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub group: String,
    pub metric: String,
    pub value: Option<f64>,
    pub count: usize,
}

/// Named metric values per group, with aggregates that record how many
/// undefined values they left out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub task: String,
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        MetricReport {
            task: task.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &str, metric: &str, value: Option<f64>, count: usize) {
        self.entries.push(MetricEntry {
            group: group.into(),
            metric: metric.into(),
            value,
            count,
        });
    }

    /// Appends an `all` row with the mean of the defined values of `metric`,
    /// and returns `(mean, excluded)`.
    pub fn aggregate(&mut self, metric: &str) -> (Option<f64>, usize) {
        let vals: Vec<Option<f64>> = self
            .entries
            .iter()
            .filter(|e| e.metric == metric && e.group != "all")
            .map(|e| e.value)
            .collect();
        let defined: Vec<f64> = vals.iter().flatten().copied().collect();
        let excluded = vals.len() - defined.len();
        let m = (!defined.is_empty()).then(|| mean(&defined));
        self.push("all", metric, m, defined.len());
        self.push("all", &format!("{metric}_excluded"), Some(excluded as f64), excluded);
        (m, excluded)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,group,metric,value,count\n");
        for e in &self.entries {
            let v = e.value.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{},{},{}", self.task, e.group, e.metric, v, e.count);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("task: {}\n", self.task);
        for e in &self.entries {
            let v = e.value.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "  {:<12} {:<30} {:>14}  (n={})", e.group, e.metric, v, e.count);
        }
        out
    }
}

/// Random draw helper for tests and demos: `len` values uniform in `[-1, 1)`.
pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
