//! Independent reference implementations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use kline_core::ar::{ArConfig, ArModel, CoarseConditioning, TemporalFeatures, TokenSequence};
use kline_core::kline::CHANNELS;
use kline_core::kline::{Frequency, KLineRecord, KLineSeries};
use kline_core::nn::{check_session_gradients, randomize_params, RowLayout, Session};
use kline_core::pipeline::CleaningParams;
use kline_core::tokenizer::{BsqConfig, TokenPair, Tokenizer, TokenizerConfig};
use kline_tensor::gradcheck::GradCheckReport;
use rand::{Rng, SeedableRng};

/// Random series of up to 200 bars with injected price jumps, zero-volume
/// runs, repeated closes and an occasional zero close.
pub fn dirty_series<R: Rng>(rng: &mut R, freq: Frequency) -> KLineSeries {
    let n = rng.random_range(1..=200);
    let mut close: f64 = 100.0;
    let mut records = Vec::with_capacity(n);
    let mut zero_vol_left = 0usize;
    let mut flat_left = 0usize;
    for t in 0..n {
        let mut open = close;
        if rng.random_bool(0.04) {
            open = close * (1.0 + rng.random_range(-0.8..0.8));
        }
        if rng.random_bool(0.03) {
            zero_vol_left = rng.random_range(1..25);
        }
        if rng.random_bool(0.03) {
            flat_left = rng.random_range(1..50);
        }
        let new_close = if flat_left > 0 {
            flat_left -= 1;
            close
        } else if rng.random_bool(0.005) {
            0.0
        } else {
            open.max(1e-3) * (1.0 + rng.random_range(-0.02..0.02))
        };
        let volume = if zero_vol_left > 0 {
            zero_vol_left -= 1;
            0.0
        } else {
            rng.random_range(1.0..100.0)
        };
        let high = open.max(new_close) * 1.01;
        let low = open.min(new_close) * 0.99;
        records.push(KLineRecord::new(
            t as i64 * freq.bar_seconds(),
            open,
            high,
            low,
            new_close,
            volume,
            volume * new_close,
        ));
        if new_close != 0.0 {
            close = new_close;
        } else {
            close = 100.0;
        }
    }
    KLineSeries::new("R", freq, records)
}

/// Enumerates maximal clean runs the slow way: a bar is rejected when some
/// all-illiquid (or all-stagnant) window containing it, inside the same
/// jump-free stretch, is longer than the tolerance; a run is valid when it
/// crosses no jump and holds no rejected bar.
pub fn brute_force_segments(series: &KLineSeries, p: &CleaningParams) -> Vec<(usize, usize)> {
    let r = &series.records;
    let n = r.len();
    let jump: Vec<bool> = (0..n)
        .map(|t| {
            t > 0 && {
                let prev = r[t - 1].close;
                prev == 0.0 || (r[t].open / prev - 1.0).abs() > p.price_jump_threshold
            }
        })
        .collect();
    // Bars a and b share a jump-free stretch when no jump lies in (a, b].
    let piece: Vec<usize> = jump
        .iter()
        .scan(0, |c, &j| {
            *c += j as usize;
            Some(*c)
        })
        .collect();
    let same_piece = |a: usize, b: usize| piece[a] == piece[b];
    let illiquid = |i: usize| r[i].volume <= p.liquidity_epsilon;
    let stagnant =
        |i: usize| i > 0 && same_piece(i - 1, i) && (r[i].close * 1e10).round() == (r[i - 1].close * 1e10).round();

    let extent = |i: usize, hit: &dyn Fn(usize) -> bool| -> usize {
        if !hit(i) {
            return 0;
        }
        let mut lo = i;
        while lo > 0 && hit(lo - 1) && same_piece(lo - 1, i) {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && hit(hi + 1) && same_piece(i, hi + 1) {
            hi += 1;
        }
        hi - lo + 1
    };
    let bad: Vec<bool> = (0..n)
        .map(|i| extent(i, &illiquid) > p.max_consecutive_illiquid || extent(i, &stagnant) > p.max_consecutive_stagnant)
        .collect();

    // [s, e) is valid when it holds no rejected bar and crosses no jump.
    let mut out = Vec::new();
    for s in 0..n {
        let mut e = s;
        while e < n && !bad[e] && (e == s || !jump[e]) {
            e += 1;
            let left_max = s == 0 || bad[s - 1] || jump[s];
            let right_max = e == n || bad[e] || jump[e];
            if left_max && right_max && e - s >= p.min_length {
                out.push((s, e));
            }
        }
    }
    out
}

/// Day-by-day reference ledger for the top-k/drop-n rule, written with maps
/// and explicit loops like a spreadsheet.
#[derive(Debug, Clone)]
pub struct OracleDay {
    pub value: f64,
    pub costs: f64,
    pub pnl: f64,
    pub holdings: BTreeMap<String, f64>,
}

pub struct OracleConfig {
    pub k: usize,
    pub n: usize,
    pub min_hold: usize,
    pub cost: f64,
}

pub fn ledger_oracle(
    signals: &[Vec<Option<f64>>],
    prices: &[Vec<f64>],
    ids: &[String],
    cfg: &OracleConfig,
) -> Vec<OracleDay> {
    let mut cash = 1.0;
    let mut shares: BTreeMap<String, f64> = BTreeMap::new();
    let mut since: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<OracleDay> = Vec::new();
    let price_of = |d: usize, id: &str| prices[d][ids.iter().position(|x| x == id).unwrap()];
    for d in 0..prices.len() {
        let marked: f64 = cash + shares.iter().map(|(id, q)| q * price_of(d, id)).sum::<f64>();
        let pnl = marked - out.last().map_or(1.0, |o| o.value);

        // Ranking: best signal first, ties alphabetical, no signal last.
        let mut order: Vec<(String, f64)> = ids
            .iter()
            .enumerate()
            .filter_map(|(a, id)| signals[d][a].map(|s| (id.clone(), s)))
            .collect();
        order.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let top: Vec<String> = order.iter().take(cfg.k).map(|x| x.0.clone()).collect();
        let rank = |id: &str| order.iter().position(|x| x.0 == id).unwrap_or(usize::MAX);

        let mut sellable: Vec<String> = shares
            .keys()
            .filter(|id| !top.contains(id) && d - since[*id] >= cfg.min_hold)
            .cloned()
            .collect();
        sellable.sort_by(|a, b| rank(b).cmp(&rank(a)).then(b.cmp(a)));
        sellable.truncate(cfg.n);

        let mut costs = 0.0;
        for id in &sellable {
            let gross = shares[id] * price_of(d, id);
            costs += gross * cfg.cost;
            cash += gross * (1.0 - cfg.cost);
            shares.remove(id);
            since.remove(id);
        }
        let free = cfg.k - shares.len().min(cfg.k);
        let buys: Vec<String> = top
            .iter()
            .filter(|id| !shares.contains_key(*id))
            .take(free)
            .cloned()
            .collect();
        if !buys.is_empty() {
            let each = cash / buys.len() as f64;
            for id in &buys {
                let px = price_of(d, id);
                // Spend `each` on shares plus their fee.
                let q = each / (px * (1.0 + cfg.cost));
                costs += q * px * cfg.cost;
                shares.insert(id.clone(), q);
                since.insert(id.clone(), d);
            }
            cash = 0.0;
        }
        let value = cash + shares.iter().map(|(id, q)| q * price_of(d, id)).sum::<f64>();
        out.push(OracleDay {
            value,
            costs,
            pnl,
            holdings: shares.clone(),
        });
    }
    out
}

/// Two-pass Pearson correlation.
pub fn pearson_ref(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    if sx == 0.0 || sy == 0.0 {
        None
    } else {
        Some(cov / (sx * sy))
    }
}

/// Average ranks by counting, for each element, how many are smaller and
/// how many are equal.
pub fn ranks_ref(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_ref(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_ref(&ranks_ref(x), &ranks_ref(y))
}

/// Micro autoregressive model: d = 8, two heads, no dropout.
pub fn micro_ar(n_layers: usize, k: usize, max_context: usize, seed: u64) -> ArModel {
    let cfg = ArConfig {
        n_layers,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        k,
        max_context,
        ffn_dropout: 0.0,
        resid_dropout: 0.0,
        attn_dropout: 0.0,
        token_dropout: 0.0,
    };
    ArModel::new(cfg, seed).expect("valid micro config")
}

pub fn random_temporal<R: Rng>(rng: &mut R) -> TemporalFeatures {
    TemporalFeatures {
        minute: rng.random_range(0..61),
        hour: rng.random_range(0..25),
        weekday: rng.random_range(0..7),
        day: rng.random_range(0..32),
        month: rng.random_range(0..13),
    }
}

pub fn random_sequence<R: Rng>(rng: &mut R, len: usize, k: usize) -> TokenSequence {
    let v = 1u32 << (k / 2);
    let tokens = (0..len)
        .map(|_| TokenPair {
            coarse: rng.random_range(0..v),
            fine: rng.random_range(0..v),
        })
        .collect();
    let temporal = (0..len).map(|_| random_temporal(rng)).collect();
    TokenSequence::new(tokens, temporal).expect("matching lengths")
}

fn backbone_rows(model: &ArModel, seq: &TokenSequence) -> Vec<Vec<f64>> {
    let mut s = Session::eval(&model.params);
    let fused = model.fuse(&mut s, &seq.tokens, &seq.temporal).unwrap();
    let h = model.backbone(&mut s, fused, &RowLayout::single(seq.len())).unwrap();
    s.value(h).to_rows()
}

/// Perturbs every position in turn (token and calendar features) and counts
/// backbone rows before it whose bits changed. Zero means no leakage.
pub fn backbone_leaks<R: Rng>(model: &ArModel, seq: &TokenSequence, rng: &mut R) -> usize {
    let base = backbone_rows(model, seq);
    let v = model.cfg.sub_vocab() as u32;
    let mut leaks = 0;
    for j in 0..seq.len() {
        let mut other = seq.clone();
        let t = &mut other.tokens[j];
        t.coarse = (t.coarse + rng.random_range(1..v)) % v;
        t.fine = (t.fine + rng.random_range(1..v)) % v;
        other.temporal[j] = random_temporal(rng);
        let rows = backbone_rows(model, &other);
        leaks += (0..j)
            .filter(|&i| base[i].iter().zip(&rows[i]).any(|(a, b)| a.to_bits() != b.to_bits()))
            .count();
    }
    leaks
}

/// Finite-difference check of the teacher-forced objective of a one-layer
/// micro model with k = 4, over two packed sequences.
pub fn ar_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = micro_ar(1, 4, 8, seed);
    randomize_params(&mut model.params, &mut rng, 0.5);
    let a = random_sequence(&mut rng, 5, 4);
    let b = random_sequence(&mut rng, 3, 4);
    check_session_gradients(&model.params, 1e-5, |s| {
        Ok(model.ar_loss(s, &[&a, &b], CoarseConditioning::GroundTruth)?.loss)
    })
    .unwrap()
}

pub fn micro_tokenizer(seed: u64) -> Tokenizer {
    let cfg = TokenizerConfig {
        n_layers: 1,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        dropout: 0.0,
        bsq: BsqConfig::with_bits(4, 2),
    };
    Tokenizer::new(cfg, seed).expect("valid micro config")
}

/// Finite-difference check of the quantizer part of the tokenizer objective
/// (commitment and both entropy terms). The reconstruction terms pass through
/// the straight-through estimator and have no finite-difference counterpart.
pub fn tokenizer_quant_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tok = micro_tokenizer(seed);
    randomize_params(&mut tok.params, &mut rng, 0.5);
    let window: Vec<[f64; CHANNELS]> = (0..6)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect();
    check_session_gradients(&tok.params, 1e-5, |s| Ok(tok.loss_vars(s, &[&window])?.quant)).unwrap()
}

/// Largest quantization distortion over `n` random latents of dimension `k`,
/// drawn from a mix of Gaussian, heavy-tailed and nearly axis-aligned vectors.
pub fn max_bsq_distortion<R: Rng>(rng: &mut R, n: usize, k: usize) -> f64 {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..n {
        let latent: Vec<f64> = match i % 3 {
            0 => (0..k).map(|_| normal.sample(rng)).collect(),
            1 => (0..k).map(|_| normal.sample(rng).powi(3)).collect(),
            _ => {
                let axis = rng.random_range(0..k);
                (0..k)
                    .map(|j| if j == axis { 1.0 } else { 1e-3 * normal.sample(rng) })
                    .collect()
            }
        };
        let code = kline_core::tokenizer::bsq_quantize(&latent).unwrap();
        worst = worst.max(code.distortion());
    }
    worst
}

/// Checks temperature scaling and nucleus filtering of one logit vector
/// against their contracts; returns a description of the first violation.
pub fn sampling_contract_violation(logits: &[f64], t: f64, p: f64) -> Option<String> {
    use kline_core::inference::{apply_temperature, nucleus_filter};
    let probs = apply_temperature(logits, t).ok()?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || probs.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Some(format!("temperature output is not a distribution (sum {sum})"));
    }
    for i in 0..logits.len() {
        for j in 0..logits.len() {
            if logits[i] > logits[j] && probs[i] < probs[j] {
                return Some(format!("temperature reversed the order of {i} and {j}"));
            }
        }
    }
    let kept = nucleus_filter(&probs, p);
    let sum: f64 = kept.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Some(format!("nucleus output sums to {sum}"));
    }
    let support: Vec<usize> = (0..kept.len()).filter(|&i| kept[i] > 0.0).collect();
    let mass: f64 = support.iter().map(|&i| probs[i]).sum();
    let floor = support.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
    if probs.iter().enumerate().any(|(i, &q)| kept[i] == 0.0 && q > floor) {
        return Some("nucleus dropped a token more likely than one it kept".into());
    }
    if p < 1.0 && mass < p - 1e-12 && support.len() < probs.iter().filter(|&&q| q > 0.0).count() {
        return Some(format!("nucleus kept mass {mass} below {p}"));
    }
    if p < 1.0 && mass - floor >= p + 1e-12 {
        return Some(format!("nucleus support is not minimal: {mass} - {floor} >= {p}"));
    }
    for &i in &support {
        if (kept[i] - probs[i] / mass).abs() > 1e-12 {
            return Some(format!("token {i} was not renormalized"));
        }
    }
    None
}

/// Largest gap between cached incremental logits and a fresh forward pass
/// over the same (window-truncated) history.
pub fn cache_gap<R: Rng>(model: &ArModel, rng: &mut R, k: usize) -> f64 {
    use kline_core::inference::{coarse_logits_from_scratch, coarse_logits_incremental};
    let max = model.cfg.max_context;
    let ctx_len = rng.random_range(1..=max);
    let extra = rng.random_range(0..=max);
    let ctx = random_sequence(rng, ctx_len, k);
    let app = random_sequence(rng, extra, k);
    let inc = coarse_logits_incremental(model, &ctx, &app).unwrap();
    let mut tokens = ctx.tokens.clone();
    tokens.extend_from_slice(&app.tokens);
    let mut temporal = ctx.temporal.clone();
    temporal.extend_from_slice(&app.temporal);
    let cut = tokens.len().saturating_sub(max);
    let full = TokenSequence::new(tokens[cut..].to_vec(), temporal[cut..].to_vec()).unwrap();
    let scratch = coarse_logits_from_scratch(model, &full).unwrap();
    inc.iter().zip(&scratch).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Generates from one random context with several seeds at a temperature
/// close to zero and reports whether all outputs agree.
pub fn near_zero_temperature_is_seed_invariant<R: Rng>(model: &ArModel, rng: &mut R, k: usize, h: usize) -> bool {
    use kline_core::inference::{generate, SamplingConfig};
    let len = rng.random_range(1..=model.cfg.max_context / 2);
    let ctx = random_sequence(rng, len, k);
    let future: Vec<TemporalFeatures> = (0..h).map(|_| random_temporal(rng)).collect();
    let cfg = SamplingConfig {
        temperature: 1e-8,
        top_p: 0.9,
        n_samples: 1,
        seed: 0,
    };
    let outs: Vec<Vec<TokenPair>> = (0..4u64)
        .map(|seed| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
            generate(model, &ctx, &future, &cfg, &mut r).unwrap()
        })
        .collect();
    outs.windows(2).all(|w| w[0] == w[1])
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> kline_tensor::Tensor {
    kline_tensor::Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Squared error of one transformer layer (attention plus feed-forward).
pub fn grad_attention_layer(seed: u64) -> GradCheckReport {
    use kline_core::nn::{AttentionConfig, TransformerLayer};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ps = kline_tensor::ParamSet::new();
    let layer = TransformerLayer::new(&mut ps, "l", &AttentionConfig::new(4, 2, 8), &mut rng);
    randomize_params(&mut ps, &mut rng, 0.6);
    let x = random_matrix(&mut rng, 3, 4);
    let target = random_matrix(&mut rng, 3, 4);
    check_session_gradients(&ps, 1e-5, |s| {
        let xv = s.constant(x.clone());
        let tv = s.constant(target.clone());
        let y = layer.forward(s, xv, &RowLayout::single(3))?;
        let d = s.g.sub(y, tv)?;
        let d = s.g.square(d);
        Ok(s.g.mean(d))
    })
    .unwrap()
}

/// Weighted sum of RMSNorm outputs, with the input as a parameter.
pub fn grad_rms_norm(seed: u64) -> GradCheckReport {
    use kline_core::nn::RmsNorm;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
    let mut ps = kline_tensor::ParamSet::new();
    let norm = RmsNorm::new(&mut ps, "n", 5);
    let x_id = ps.add("x", random_matrix(&mut rng, 3, 5));
    randomize_params(&mut ps, &mut rng, 1.0);
    let w = random_matrix(&mut rng, 3, 5);
    check_session_gradients(&ps, 1e-6, |s| {
        let x = s.p(x_id);
        let y = norm.forward(s, x)?;
        let wv = s.constant(w.clone());
        let y = s.g.mul(y, wv)?;
        Ok(s.g.sum(y))
    })
    .unwrap()
}

/// Weighted sum of the single-slot cross-attention output, with query and
/// memory as parameters.
pub fn grad_cross_attention(seed: u64) -> GradCheckReport {
    use kline_core::nn::CrossAttention;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(200 + seed);
    let mut ps = kline_tensor::ParamSet::new();
    let ca = CrossAttention::new(&mut ps, "c", 4, 2, &mut rng);
    let q_id = ps.add("q", random_matrix(&mut rng, 1, 4));
    let m_id = ps.add("m", random_matrix(&mut rng, 1, 4));
    randomize_params(&mut ps, &mut rng, 0.8);
    let w = random_matrix(&mut rng, 1, 4);
    check_session_gradients(&ps, 1e-5, |s| {
        let (q, m) = (s.p(q_id), s.p(m_id));
        let y = ca.forward(s, q, m)?;
        let wv = s.constant(w.clone());
        let y = s.g.mul(y, wv)?;
        Ok(s.g.sum(y))
    })
    .unwrap()
}

/// Log-probabilities of the recurrent classifier over two short sequences.
pub fn grad_recurrent_cell(seed: u64) -> GradCheckReport {
    use kline_core::nn::{RecurrentCellConfig, RecurrentHead};
    let cell_cfg = RecurrentCellConfig {
        input_dim: 3,
        hidden_dim: 4,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(300 + seed);
    let mut ps = kline_tensor::ParamSet::new();
    let head = RecurrentHead::classifier(&mut ps, "r", &cell_cfg, &mut rng);
    randomize_params(&mut ps, &mut rng, 0.7);
    let seqs: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();
    check_session_gradients(&ps, 1e-5, |s| {
        let refs: Vec<&[Vec<f64>]> = seqs.iter().map(Vec::as_slice).collect();
        let steps = RecurrentHead::steps_from_sequences(s, &refs)?;
        let p = head.forward(s, &steps)?;
        let lp = s.g.log(p);
        Ok(s.g.sum(lp))
    })
    .unwrap()
}

pub fn asset_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{}", (b'A' + i as u8) as char)).collect()
}

pub fn day_labels(n: usize) -> Vec<String> {
    (0..n).map(|d| format!("day{d:02}")).collect()
}

/// Three assets over ten days, k = 2, n = 1, two-day minimum hold, 1% cost.
/// A trends up, B trends down, C is flat; signals rotate so that the ledger
/// sees an initial fill, a blocked sale, a swap and a tie.
pub fn manual_scenario() -> (
    Vec<Vec<Option<f64>>>,
    Vec<Vec<f64>>,
    kline_core::evaluation::BacktestConfig,
) {
    let prices: Vec<Vec<f64>> = (0..10).map(|d| vec![10.0 + d as f64, 20.0 - d as f64, 5.0]).collect();
    let s = |a: f64, b: f64, c: f64| vec![Some(a), Some(b), Some(c)];
    let signals = vec![
        s(3.0, 2.0, 1.0), // buy A, B
        s(3.0, 1.0, 2.0), // B out of top 2 but held 1 day: kept
        s(3.0, 1.0, 2.0), // B held 2 days: sold, C bought
        s(3.0, 1.0, 2.0),
        s(1.0, 2.0, 3.0), // A out of top 2, held 4 days: sold, B bought
        s(1.0, 2.0, 3.0),
        s(2.0, 2.0, 1.0), // A/B tie, A wins by id; C held 4 days: sold, A bought
        s(2.0, 2.0, 1.0),
        s(2.0, 2.0, 1.0),
        vec![None, Some(1.0), None], // only B valid; A held 3 days: sold
    ];
    let cfg = kline_core::evaluation::BacktestConfig {
        k: 2,
        n: 1,
        min_hold: 2,
        cost: 0.01,
        horizon: 10,
        initial_capital: 1.0,
    };
    (signals, prices, cfg)
}

/// Largest per-day gap between the engine and the reference ledger on the
/// manual scenario, over value, costs, pnl and holdings.
pub fn manual_scenario_gap() -> f64 {
    let (signals, prices, cfg) = manual_scenario();
    let ids = asset_ids(3);
    let r = kline_core::evaluation::backtest_topk(&signals, &prices, &[0.0; 10], &ids, &day_labels(10), &cfg).unwrap();
    let oracle = ledger_oracle(
        &signals,
        &prices,
        &ids,
        &OracleConfig {
            k: cfg.k,
            n: cfg.n,
            min_hold: cfg.min_hold,
            cost: cfg.cost,
        },
    );
    let mut gap = 0.0f64;
    for (got, want) in r.ledger.iter().zip(&oracle) {
        gap = gap
            .max((got.value_after - want.value).abs())
            .max((got.costs - want.costs).abs())
            .max((got.pnl - want.pnl).abs());
        for (a, id) in ids.iter().enumerate() {
            gap = gap.max((got.shares[a] - want.holdings.get(id).copied().unwrap_or(0.0)).abs());
        }
    }
    if r.ledger.len() != oracle.len() {
        return f64::INFINITY;
    }
    gap
}

pub struct Scenario {
    pub signals: Vec<Vec<Option<f64>>>,
    pub prices: Vec<Vec<f64>>,
    pub bench: Vec<f64>,
    pub cfg: kline_core::evaluation::BacktestConfig,
}

/// Random universe of 2 to 7 assets over 2 to 39 days with missing signals.
pub fn random_scenario<R: Rng>(rng: &mut R) -> Scenario {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::<f64>::new(0.0, 0.02).unwrap();
    let assets = rng.random_range(2..8);
    let days = rng.random_range(2..40);
    let k = rng.random_range(1..=assets);
    let n = rng.random_range(1..=k);
    let mut p: Vec<f64> = (0..assets).map(|_| rng.random_range(5.0..50.0)).collect();
    let mut prices = Vec::new();
    let mut signals = Vec::new();
    for _ in 0..days {
        p.iter_mut().for_each(|x| *x *= noise.sample(rng).exp());
        prices.push(p.clone());
        signals.push(
            (0..assets)
                .map(|_| rng.random_bool(0.9).then(|| rng.random_range(-1.0..1.0)))
                .collect(),
        );
    }
    let cfg = kline_core::evaluation::BacktestConfig {
        k,
        n,
        min_hold: rng.random_range(0..6),
        cost: rng.random_range(0.0..0.01),
        horizon: 10,
        initial_capital: 1.0,
    };
    let bench = (0..days).map(|_| noise.sample(rng)).collect();
    Scenario {
        signals,
        prices,
        bench,
        cfg,
    }
}

/// Largest violation of `value_d - value_{d-1} = sum_a q_{d-1,a} (p_d - p_{d-1}) - costs_d`.
pub fn conservation_gap(r: &kline_core::evaluation::BacktestResult, prices: &[Vec<f64>]) -> f64 {
    let mut gap = 0.0f64;
    for d in 1..r.ledger.len() {
        let prev = &r.ledger[d - 1];
        let pnl: f64 = prev
            .shares
            .iter()
            .zip(prices[d].iter().zip(&prices[d - 1]))
            .map(|(q, (p1, p0))| q * (p1 - p0))
            .sum();
        let change = r.ledger[d].value_after - prev.value_after;
        gap = gap.max((change - (pnl - r.ledger[d].costs)).abs());
    }
    gap
}

/// Largest gap between the metric implementations and the reference
/// formulas on one random case. Ties are forced in half of the cases.
pub fn metric_case_gap<R: Rng>(rng: &mut R) -> f64 {
    use kline_core::evaluation::{mae_r2, pearson_ic, rank_ic, realized_volatility};
    let n = rng.random_range(2..60);
    let tied = rng.random_bool(0.5);
    let draw = |rng: &mut R| {
        let v: f64 = rng.random_range(-2.0..2.0);
        if tied {
            (v * 3.0).round()
        } else {
            v
        }
    };
    let x: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let y: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let mut gap = 0.0f64;
    let mut compare = |got: Option<f64>, want: Option<f64>| {
        gap = gap.max(match (got, want) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
    };
    compare(pearson_ic(&x, &y).unwrap(), pearson_ref(&x, &y));
    compare(rank_ic(&x, &y).unwrap(), spearman_ref(&x, &y));

    let (mae, r2) = mae_r2(&x, &y).unwrap();
    let m = y.iter().sum::<f64>() / n as f64;
    let mae_ref = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|b| (b - m) * (b - m)).sum();
    let r2_ref = (ss_tot > 0.0).then(|| 1.0 - x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / ss_tot);
    compare(Some(mae), Some(mae_ref));
    compare(r2, r2_ref);

    let prices: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..200.0)).collect();
    let rv_ref: f64 = prices.windows(2).map(|w| (w[1] / w[0]).ln().powi(2)).sum();
    compare(Some(realized_volatility(&prices).unwrap()), Some(rv_ref));
    gap
}
