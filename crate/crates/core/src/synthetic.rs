//! Seeded synthetic K-line generators for tests, demos and the scaling study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::kline::{Frequency, KLineRecord, KLineSeries};

/// Builds a bar around `open -> close` with wicks of relative size `wick`.
fn bar(ts: i64, open: f64, close: f64, wick: f64, volume: f64) -> KLineRecord {
    let high = open.max(close) * (1.0 + wick);
    let low = open.min(close) * (1.0 - wick);
    KLineRecord::new(ts, open, high, low, close, volume, volume * close)
}

/// Log price `0.05 * sin(2 pi t / period)` plus Gaussian noise of scale
/// `noise`, with volume tracking the cycle.
pub fn sine_klines(asset: &str, n: usize, period: f64, noise: f64, seed: u64) -> KLineSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = Frequency::Min5;
    let mut prev = 100.0 * (0.05 * phase.sin()).exp();
    let records = (0..n)
        .map(|t| {
            let angle = std::f64::consts::TAU * t as f64 / period + phase;
            let close = 100.0 * (0.05 * angle.sin() + noise * eps.sample(&mut rng)).exp();
            let wick = 0.002 * (1.0 + angle.cos().abs());
            let volume = 1_000.0 * (1.5 + angle.cos()) * (1.0 + noise * eps.sample(&mut rng)).abs();
            let r = bar(t as i64 * freq.bar_seconds(), prev, close, wick, volume);
            prev = close;
            r
        })
        .collect();
    KLineSeries::new(asset, freq, records)
}

/// Daily bars whose log price follows a mean-reverting AR(1) process
/// `x_t = phi x_{t-1} + sigma e_t`.
pub fn ar1_klines(asset: &str, n: usize, phi: f64, sigma: f64, seed: u64) -> KLineSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let freq = Frequency::Daily;
    let mut x = 0.0;
    let mut prev = 100.0;
    let records = (0..n)
        .map(|t| {
            x = phi * x + sigma * eps.sample(&mut rng);
            let close = 100.0 * f64::exp(x);
            let volume = 1_000.0 * (1.0 + 0.2 * eps.sample(&mut rng).abs());
            let r = bar(t as i64 * freq.bar_seconds(), prev, close, sigma * 0.5, volume);
            prev = close;
            r
        })
        .collect();
    KLineSeries::new(asset, freq, records)
}

/// Geometric random walks with per-asset drift, daily bars.
pub fn random_walk_universe(n_assets: usize, n_days: usize, seed: u64) -> Vec<KLineSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n_assets)
        .map(|a| {
            let drift = rng.random_range(-0.001..0.001);
            let vol = rng.random_range(0.01..0.03);
            let mut prev = rng.random_range(20.0..200.0);
            let records = (0..n_days)
                .map(|t| {
                    let close = prev * (drift + vol * eps.sample(&mut rng)).exp();
                    let volume = 10_000.0 * (1.0 + eps.sample(&mut rng).abs());
                    let r = bar(t as i64 * 86_400, prev, close, vol * 0.5, volume);
                    prev = close;
                    r
                })
                .collect();
            KLineSeries::new(format!("A{a:03}"), Frequency::Daily, records)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kline::validate_series;

    #[test]
    fn generators_are_valid_and_seeded() {
        for s in [sine_klines("S", 300, 24.0, 0.01, 1), ar1_klines("R", 300, 0.9, 0.02, 2)] {
            assert!(validate_series(&s).is_empty());
        }
        assert_eq!(sine_klines("S", 50, 24.0, 0.01, 9), sine_klines("S", 50, 24.0, 0.01, 9));
        let u = random_walk_universe(3, 40, 5);
        assert_eq!(u.len(), 3);
        assert!(u.iter().all(|s| validate_series(s).is_empty() && s.len() == 40));
    }
}
