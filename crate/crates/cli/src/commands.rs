use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kline_cli::artifacts::{load_model, load_tokenizer, save_model, save_tokenizer};
use kline_cli::config::RunConfig;
use kline_cli::io::{data_files, forecast_csv, ingest_csv, quality_row, segment_rows, QUALITY_HEADER, SEGMENTS_HEADER};
use kline_core::ar::{count_parameters, ArConfig, ArModel, TemporalFeatures, TokenSequence};
use kline_core::evaluation::{
    backtest_topk, discriminative_score, equity_curve_csv, h_day_signal, mae_r2, price_series_metrics,
    realized_volatility, tstr, tstr_windows, MetricReport,
};
use kline_core::inference::{forecast, SamplingConfig};
use kline_core::kline::{slice, KLineSeries};
use kline_core::pipeline::{clean_series, fit_normalization, normalize, normalized_windows, FilterOutcome};
use kline_core::synthetic::{random_walk_universe, sine_klines};
use kline_core::tokenizer::{train_tokenizer, Tokenizer};
use kline_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const TOKENIZER_FILE: &str = "tokenizer.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

fn write_artifact(path: &Path, contents: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    announce(path)?;
    Ok(path.to_path_buf())
}

fn announce(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("wrote {} sha256={hex}", path.display());
    Ok(())
}

/// Input series: the configured CSV file(s), or the synthetic sine series.
pub fn load_series(cfg: &RunConfig) -> Result<Vec<KLineSeries>> {
    let freq = cfg.frequency()?;
    if cfg.paths.data.is_empty() {
        let d = &cfg.data;
        let mut s = sine_klines(
            &d.asset_id,
            d.synthetic_bars,
            d.synthetic_period,
            d.synthetic_noise,
            cfg.seeds.data,
        );
        for (i, r) in s.records.iter_mut().enumerate() {
            r.timestamp = i as i64 * freq.bar_seconds();
        }
        s.frequency = freq;
        return Ok(vec![s]);
    }
    let mut out = Vec::new();
    for path in data_files(Path::new(&cfg.paths.data))? {
        let ingested = ingest_csv(&path, freq)?;
        if !ingested.violations.is_empty() {
            eprintln!(
                "{}: {} validation violations (first: bar {} {})",
                path.display(),
                ingested.violations.len(),
                ingested.violations[0].index,
                ingested.violations[0].rule
            );
        }
        out.push(ingested.series);
    }
    Ok(out)
}

fn cleaned(cfg: &RunConfig, series: &[KLineSeries]) -> Result<Vec<(KLineSeries, FilterOutcome)>> {
    let params = cfg.cleaning_params()?;
    Ok(series.iter().map(|s| clean_series(s, &params)).collect())
}

/// Kept segments of every input series, as standalone series.
fn clean_segments(cfg: &RunConfig) -> Result<Vec<KLineSeries>> {
    let mut out = Vec::new();
    for (imputed, outcome) in cleaned(cfg, &load_series(cfg)?)? {
        for seg in &outcome.segments {
            out.push(slice(&imputed, seg)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no segment survived cleaning".into()).into());
    }
    Ok(out)
}

pub fn clean(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let series = load_series(cfg)?;
    let mut quality = format!("{QUALITY_HEADER}\n");
    let mut segments = format!("{SEGMENTS_HEADER}\n");
    for (imputed, outcome) in cleaned(cfg, &series)? {
        let _ = writeln!(quality, "{}", quality_row(&imputed, &outcome));
        segments.push_str(&segment_rows(&imputed, &outcome.segments));
    }
    Ok(vec![
        write_artifact(&cfg.report_path("quality_report.csv"), quality.as_bytes())?,
        write_artifact(&cfg.report_path("segments.csv"), segments.as_bytes())?,
    ])
}

pub fn train_tokenizer_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let t = &cfg.tokenizer;
    let mut windows = Vec::new();
    for seg in clean_segments(cfg)? {
        if seg.len() >= t.window {
            windows.extend(normalized_windows(&seg, t.window, t.stride)?);
        }
    }
    if windows.is_empty() {
        return Err(Error::Data(format!("no clean segment holds a {}-bar window", t.window)).into());
    }
    let (tok, trace) = train_tokenizer(&windows, t.model_config(), t.train_config(cfg.seeds.tokenizer))?;
    let path = cfg.checkpoint_path(TOKENIZER_FILE);
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    save_tokenizer(&path, &tok, t)?;
    announce(&path)?;
    let mut log = String::from("step,total,coarse,fine,quant,commitment,sample_entropy,codebook_entropy\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(
            log,
            "{i},{},{},{},{},{},{},{}",
            l.total, l.coarse, l.fine, l.quant, l.commitment, l.sample_entropy, l.codebook_entropy
        );
    }
    Ok(vec![
        path,
        write_artifact(&cfg.report_path("tokenizer_loss.csv"), log.as_bytes())?,
    ])
}

fn tokenized_sequence(tok: &Tokenizer, window: &KLineSeries) -> Result<TokenSequence> {
    let stats = fit_normalization(window)?;
    let (tokens, _) = tok.encode(&normalize(window, &stats))?;
    let temporal = window
        .records
        .iter()
        .map(|r| TemporalFeatures::from_timestamp(r.timestamp, window.frequency))
        .collect();
    Ok(TokenSequence::new(tokens, temporal)?)
}

pub fn train_model_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tok = load_tokenizer(&cfg.checkpoint_path(TOKENIZER_FILE)).context("loading the tokenizer checkpoint")?;
    let m = &cfg.model;
    let mut dataset = Vec::new();
    for seg in clean_segments(cfg)? {
        if seg.len() < m.sequence_length {
            continue;
        }
        let mut start = 0;
        while start + m.sequence_length <= seg.len() {
            let w = slice(
                &seg,
                &kline_core::kline::Segment::new(&seg, start, start + m.sequence_length),
            )?;
            dataset.push(tokenized_sequence(&tok, &w)?);
            start += m.stride;
        }
    }
    if dataset.is_empty() {
        return Err(Error::Data(format!("no clean segment holds a {}-bar sequence", m.sequence_length)).into());
    }
    let arch = m.model_config(tok.cfg.bsq.k)?;
    let (model, trace) = kline_core::ar::train_ar(&dataset, arch, m.train_config(cfg.seeds.model))?;
    let path = cfg.checkpoint_path(MODEL_FILE);
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    save_model(&path, &model)?;
    announce(&path)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
    }
    Ok(vec![
        path,
        write_artifact(&cfg.report_path("model_loss.csv"), log.as_bytes())?,
    ])
}

fn load_pair(cfg: &RunConfig) -> Result<(Tokenizer, ArModel)> {
    let tok = load_tokenizer(&cfg.checkpoint_path(TOKENIZER_FILE)).context("loading the tokenizer checkpoint")?;
    let model = load_model(&cfg.checkpoint_path(MODEL_FILE)).context("loading the model checkpoint")?;
    Ok((tok, model))
}

fn tail(series: &KLineSeries, len: usize) -> Result<KLineSeries> {
    if series.len() < len {
        return Err(Error::Data(format!(
            "{} has {} clean bars but {len} are needed",
            series.asset_id,
            series.len()
        ))
        .into());
    }
    Ok(slice(
        series,
        &kline_core::kline::Segment::new(series, series.len() - len, series.len()),
    )?)
}

pub struct ForecastArgs {
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub output: Option<PathBuf>,
}

pub fn forecast_cmd(cfg: &RunConfig, args: &ForecastArgs) -> Result<Vec<PathBuf>> {
    let (tok, model) = load_pair(cfg)?;
    let mut sampling = cfg.sampling.sampling_config(args.seed.unwrap_or(cfg.seeds.sampling));
    sampling.n_samples = args.n_samples.unwrap_or(sampling.n_samples);
    let h = args.horizon.unwrap_or(cfg.sampling.horizon);
    let segments = clean_segments(cfg)?;
    let last = segments.last().expect("non-empty");
    let window = tail(last, cfg.sampling.lookback)?;
    let out = forecast(&window, &tok, &model, h, &sampling)?;
    let csv = forecast_csv(&out.timestamps, &out.rollouts, Some(&out.ensemble_mean));
    let path = args.output.clone().unwrap_or_else(|| cfg.report_path("forecast.csv"));
    Ok(vec![write_artifact(&path, csv.as_bytes())?])
}

/// Generated continuations of real contexts, plus the real continuations of
/// the same length for comparison.
fn generated_pairs(
    cfg: &RunConfig,
    tok: &Tokenizer,
    model: &ArModel,
    sampling: SamplingConfig,
) -> Result<Vec<(kline_core::inference::ForecastResult, KLineSeries)>> {
    let lookback = cfg.sampling.lookback;
    let len = cfg.sampling.generate_length;
    let segments: Vec<KLineSeries> = clean_segments(cfg)?
        .into_iter()
        .filter(|s| s.len() >= lookback + len)
        .collect();
    if segments.is_empty() {
        return Err(Error::Data(format!("no clean segment holds {} bars", lookback + len)).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut out = Vec::new();
    for i in 0..cfg.sampling.generate_sequences {
        let seg = &segments[rng.random_range(0..segments.len())];
        let start = rng.random_range(0..=seg.len() - lookback - len);
        let ctx = slice(seg, &kline_core::kline::Segment::new(seg, start, start + lookback))?;
        let real = slice(
            seg,
            &kline_core::kline::Segment::new(seg, start + lookback, start + lookback + len),
        )?;
        let s = SamplingConfig {
            n_samples: 1,
            seed: sampling.seed.wrapping_add(i as u64),
            ..sampling
        };
        out.push((forecast(&ctx, tok, model, len, &s)?, real));
    }
    Ok(out)
}

pub fn generate_cmd(cfg: &RunConfig, seed: Option<u64>, output: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let (tok, model) = load_pair(cfg)?;
    let sampling = SamplingConfig::generation(seed.unwrap_or(cfg.seeds.sampling));
    let pairs = generated_pairs(cfg, &tok, &model, sampling)?;
    let mut csv = String::from("timestamp,open,high,low,close,volume,amount,rollout_id\n");
    for (i, (f, _)) in pairs.iter().enumerate() {
        for (t, r) in f.timestamps.iter().zip(&f.rollouts[0]) {
            let _ = writeln!(csv, "{t},{},{},{},{},{},{},{i}", r[0], r[1], r[2], r[3], r[4], r[5]);
        }
    }
    let path = output.unwrap_or_else(|| cfg.report_path("generated.csv"));
    Ok(vec![write_artifact(&path, csv.as_bytes())?])
}

fn zscore_rows(rows: &[[f64; 6]]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let mut mean = [0.0; 6];
    let mut sd = [0.0; 6];
    for r in rows {
        for c in 0..6 {
            mean[c] += r[c] / n;
        }
    }
    for r in rows {
        for c in 0..6 {
            sd[c] += (r[c] - mean[c]).powi(2) / n;
        }
    }
    rows.iter()
        .map(|r| (0..6).map(|c| (r[c] - mean[c]) / sd[c].sqrt().max(1e-8)).collect())
        .collect()
}

pub fn evaluate_cmd(cfg: &RunConfig, output: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let (tok, model) = load_pair(cfg)?;
    let e = &cfg.evaluation;
    let lookback = cfg.sampling.lookback;
    let h = cfg.sampling.horizon;
    let sampling = cfg.sampling.sampling_config(cfg.seeds.sampling);
    let mut report = MetricReport::new("forecast");
    let mut n = 0;
    for seg in clean_segments(cfg)? {
        let mut origin = lookback;
        while origin + h <= seg.len() && n < e.max_windows {
            let ctx = slice(&seg, &kline_core::kline::Segment::new(&seg, origin - lookback, origin))?;
            let f = forecast(&ctx, &tok, &model, h, &sampling)?;
            let actual = &seg.records[origin..origin + h];
            let pred4: Vec<[f64; 4]> = f.ensemble_mean.iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
            let act4: Vec<[f64; 4]> = actual.iter().map(|r| r.prices()).collect();
            let group = format!("{}@{}", seg.asset_id, seg.records[origin].timestamp);
            let m = price_series_metrics(&pred4, &act4)?;
            report.push(&group, "ic", m.ic, m.ic_channels);
            report.push(&group, "rank_ic", m.rank_ic, m.rank_ic_channels);
            let pc: Vec<f64> = f.ensemble_mean.iter().map(|r| r[3]).collect();
            let ac: Vec<f64> = actual.iter().map(|r| r.close).collect();
            let (mae, r2) = mae_r2(&pc, &ac)?;
            report.push(&group, "mae", Some(mae), h);
            report.push(&group, "r2", r2, h);
            let last = seg.records[origin - 1].close;
            let mut path_p = vec![last];
            path_p.extend(&pc);
            let mut path_a = vec![last];
            path_a.extend(&ac);
            report.push(&group, "realized_vol_pred", realized_volatility(&path_p).ok(), h);
            report.push(&group, "realized_vol_actual", realized_volatility(&path_a).ok(), h);
            origin += e.stride;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("no clean segment holds {} bars", lookback + h)).into());
    }
    for metric in ["ic", "rank_ic", "mae", "r2", "realized_vol_pred", "realized_vol_actual"] {
        report.aggregate(metric);
    }

    if e.fidelity {
        let pairs = generated_pairs(cfg, &tok, &model, SamplingConfig::generation(cfg.seeds.sampling))?;
        let synthetic: Vec<Vec<Vec<f64>>> = pairs.iter().map(|(f, _)| zscore_rows(&f.rollouts[0])).collect();
        let real: Vec<Vec<Vec<f64>>> = pairs.iter().map(|(_, r)| zscore_rows(&r.to_matrix())).collect();
        if pairs.len() >= 2 {
            let d = discriminative_score(&real, &synthetic, &e.probe(), cfg.seeds.evaluation)?;
            report.push("all", "discriminative_accuracy", Some(d.accuracy), d.test_size);
            report.push("all", "discriminative_score", Some(d.score), d.test_size);
        }
        let len = cfg.sampling.generate_length;
        let (lb, hz) = tstr_windows(cfg.frequency()?)
            .filter(|(l, h)| l + h <= len)
            .unwrap_or_else(|| {
                let lb = (len * 3 / 4).max(2);
                (lb, len.saturating_sub(lb).max(1))
            });
        if lb + hz <= len {
            let syn: Vec<Vec<f64>> = pairs
                .iter()
                .map(|(f, _)| f.rollouts[0].iter().map(|r| r[3]).collect())
                .collect();
            let rl: Vec<Vec<f64>> = pairs.iter().map(|(_, r)| r.closes()).collect();
            match tstr(&syn, &rl, lb, hz, &e.probe(), cfg.seeds.evaluation) {
                Ok(t) => {
                    report.push("all", "tstr_ic", t.ic, t.test_windows);
                    report.push("all", "tstr_rankic", t.rank_ic, t.test_windows);
                }
                Err(Error::Precondition(msg)) => eprintln!("tstr skipped: {msg}"),
                Err(other) => return Err(other.into()),
            }
        }
    }
    let csv_path = output.unwrap_or_else(|| cfg.report_path("metrics.csv"));
    let text_path = csv_path.with_extension("txt");
    Ok(vec![
        write_artifact(&csv_path, report.to_csv().as_bytes())?,
        write_artifact(&text_path, report.to_text().as_bytes())?,
    ])
}

fn backtest_universe(cfg: &RunConfig) -> Result<Vec<KLineSeries>> {
    let b = &cfg.backtest;
    let universe = if cfg.paths.data.is_empty() {
        random_walk_universe(b.synthetic_assets, b.synthetic_days, cfg.seeds.data)
    } else {
        load_series(cfg)?
    };
    let first = &universe[0];
    for s in &universe[1..] {
        if s.timestamps() != first.timestamps() {
            return Err(Error::Data(format!(
                "{} and {} have different calendars",
                first.asset_id, s.asset_id
            ))
            .into());
        }
    }
    if universe.len() < b.k {
        bail!(Error::config(
            "backtest.k",
            format!("{} exceeds the {} assets", b.k, universe.len())
        ));
    }
    Ok(universe)
}

pub fn backtest_cmd(cfg: &RunConfig, output: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let (tok, model) = load_pair(cfg)?;
    let b = &cfg.backtest;
    let universe = backtest_universe(cfg)?;
    let len = universe[0].len();
    if len < b.lookback + b.days {
        return Err(Error::Data(format!(
            "{len} days cannot cover lookback {} plus {} trading days",
            b.lookback, b.days
        ))
        .into());
    }
    let sampling = SamplingConfig {
        n_samples: b.n_samples,
        ..cfg.sampling.sampling_config(cfg.seeds.sampling)
    };
    let days: Vec<usize> = (len - b.days..len).collect();
    let mut signals = Vec::with_capacity(days.len());
    let mut prices = Vec::with_capacity(days.len());
    let mut bench = Vec::with_capacity(days.len());
    let mut dates = Vec::with_capacity(days.len());
    for &d in &days {
        let mut row = Vec::with_capacity(universe.len());
        for s in &universe {
            let ctx = slice(s, &kline_core::kline::Segment::new(s, d + 1 - b.lookback, d + 1))?;
            let f = forecast(&ctx, &tok, &model, b.horizon, &sampling)?;
            let closes: Vec<f64> = f.ensemble_mean.iter().map(|r| r[3]).collect();
            row.push(h_day_signal(s.records[d].close, &closes).ok().filter(|v| v.is_finite()));
        }
        signals.push(row);
        prices.push(universe.iter().map(|s| s.records[d].close).collect::<Vec<f64>>());
        let r: f64 = universe
            .iter()
            .map(|s| s.records[d].close / s.records[d - 1].close - 1.0)
            .sum::<f64>()
            / universe.len() as f64;
        bench.push(r);
        let ts = universe[0].records[d].timestamp;
        dates.push(
            chrono::DateTime::from_timestamp(ts, 0)
                .map(|t| t.format("%Y-%m-%d").to_string())
                .unwrap_or_else(|| ts.to_string()),
        );
    }
    let ids: Vec<String> = universe.iter().map(|s| s.asset_id.clone()).collect();
    let result = backtest_topk(&signals, &prices, &bench, &ids, &dates, &b.backtest_config())?;
    let mut report = MetricReport::new("backtest");
    report.push("portfolio", "aer", Some(result.aer), days.len());
    report.push("portfolio", "ir", result.ir, days.len());
    let turnover: usize = result.ledger.iter().map(|l| l.bought.len() + l.sold.len()).sum();
    report.push("portfolio", "trades", Some(turnover as f64), days.len());
    let curve_path = output.unwrap_or_else(|| cfg.report_path("equity_curve.csv"));
    let report_path = curve_path.with_file_name("backtest_report.csv");
    Ok(vec![
        write_artifact(&curve_path, equity_curve_csv(&result.curve).as_bytes())?,
        write_artifact(&report_path, report.to_csv().as_bytes())?,
    ])
}

pub struct AuditArgs {
    pub preset: String,
    pub k: Option<usize>,
    pub d_model: Option<usize>,
    pub splits: Vec<usize>,
    pub output: Option<PathBuf>,
}

pub fn audit_params_cmd(args: &AuditArgs) -> Result<Vec<PathBuf>> {
    let mut arch = ArConfig::preset(&args.preset)?;
    arch.k = args.k.unwrap_or(arch.k);
    arch.d_model = args.d_model.unwrap_or(arch.d_model);
    let splits = if args.splits.is_empty() {
        (1..=arch.k)
            .filter(|s| arch.k % s == 0 && arch.k / s <= 20)
            .take(4)
            .collect()
    } else {
        args.splits.clone()
    };
    let mut csv = String::from("splits,core,vocab,fusion,total,steps_per_token\n");
    for s in splits {
        let a = count_parameters(&arch, s)?;
        let m = |v: f64| format!("{:.1}M", v / 1e6);
        println!(
            "splits={s} core={} vocab={} fusion={} total={} steps_per_token={}",
            m(a.core),
            m(a.vocab),
            m(a.fusion),
            m(a.total),
            a.steps_per_token
        );
        let _ = writeln!(
            csv,
            "{s},{},{},{},{},{}",
            a.core, a.vocab, a.fusion, a.total, a.steps_per_token
        );
    }
    match &args.output {
        Some(p) => Ok(vec![write_artifact(p, csv.as_bytes())?]),
        None => Ok(Vec::new()),
    }
}
