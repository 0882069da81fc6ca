//! Hierarchical autoregressive model over (coarse, fine) token pairs.

use kline_tensor::{ParamId, ParamSet, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kline::{calendar_fields, Frequency};
use crate::nn::{
    normal_tensor, AttentionConfig, CrossAttention, Linear, RmsNorm, RowLayout, Session, TransformerLayer,
    TransformerStack, INIT_STD,
};
use crate::tokenizer::TokenPair;
use crate::train::{Optimizer, TrainConfig};
use crate::{Error, Result};

/// Rows of the five calendar tables. Row 0 is the "not applicable" entry.
pub const TEMPORAL_TABLE_ROWS: [usize; 5] = [61, 25, 7, 32, 13];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub k: usize,
    pub max_context: usize,
    pub ffn_dropout: f64,
    pub resid_dropout: f64,
    pub attn_dropout: f64,
    pub token_dropout: f64,
}

impl ArConfig {
    pub fn small() -> Self {
        ArConfig {
            n_layers: 8,
            d_model: 512,
            d_ff: 1024,
            n_heads: 8,
            k: 20,
            max_context: 512,
            ffn_dropout: 0.25,
            resid_dropout: 0.25,
            attn_dropout: 0.1,
            token_dropout: 0.1,
        }
    }

    pub fn base() -> Self {
        ArConfig {
            n_layers: 12,
            d_model: 832,
            d_ff: 2048,
            n_heads: 16,
            ffn_dropout: 0.2,
            resid_dropout: 0.2,
            attn_dropout: 0.0,
            token_dropout: 0.0,
            ..Self::small()
        }
    }

    pub fn large() -> Self {
        ArConfig {
            n_layers: 18,
            d_model: 1664,
            d_ff: 3072,
            n_heads: 32,
            ffn_dropout: 0.0,
            resid_dropout: 0.0,
            ..Self::base()
        }
    }

    /// Desk-scale model for tests and demos.
    pub fn tiny() -> Self {
        ArConfig {
            n_layers: 2,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            k: 16,
            max_context: 128,
            ffn_dropout: 0.0,
            resid_dropout: 0.0,
            attn_dropout: 0.0,
            token_dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            _ => Err(Error::config("model.preset", format!("unknown preset {name:?}"))),
        }
    }

    pub fn sub_vocab(&self) -> usize {
        1 << (self.k / 2)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            ffn_dropout: self.ffn_dropout,
            resid_dropout: self.resid_dropout,
            attn_dropout: self.attn_dropout,
            ..AttentionConfig::new(self.d_model, self.n_heads, self.d_ff)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("model.n_layers", "must be positive"));
        }
        if self.k < 2 || !self.k.is_multiple_of(2) || self.k > 40 {
            return Err(Error::config(
                "model.k",
                format!("k must be even in [2, 40], got {}", self.k),
            ));
        }
        if !(2..=512).contains(&self.max_context) {
            return Err(Error::config(
                "model.max_context",
                format!("must lie in [2, 512], got {}", self.max_context),
            ));
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::config("model.token_dropout", "must lie in [0, 1)"));
        }
        self.attention().validate()
    }
}

/// Calendar indices of one bar, offset so that 0 means "not applicable".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TemporalFeatures {
    /// 1 + minute of the hour for intraday bars, else 0.
    pub minute: usize,
    /// 1 + hour of the day for intraday bars, else 0.
    pub hour: usize,
    /// Monday = 0.
    pub weekday: usize,
    /// 1..=31.
    pub day: usize,
    /// 1..=12.
    pub month: usize,
}

impl TemporalFeatures {
    pub fn from_timestamp(timestamp: i64, frequency: Frequency) -> Self {
        let (minute, hour, weekday, day, month) = calendar_fields(timestamp);
        let intraday = frequency.is_intraday();
        TemporalFeatures {
            minute: if intraday { minute as usize + 1 } else { 0 },
            hour: if intraday { hour as usize + 1 } else { 0 },
            weekday: weekday as usize,
            day: day as usize,
            month: month as usize,
        }
    }

    fn indices(&self) -> [usize; 5] {
        [self.minute, self.hour, self.weekday, self.day, self.month]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&v, &rows)) in self.indices().iter().zip(&TEMPORAL_TABLE_ROWS).enumerate() {
            if v >= rows {
                return Err(Error::Range(format!("temporal field {i} = {v} outside [0, {rows})")));
            }
        }
        Ok(())
    }
}

/// Tokens with the calendar features of their bars.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenPair>,
    pub temporal: Vec<TemporalFeatures>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenPair>, temporal: Vec<TemporalFeatures>) -> Result<Self> {
        if tokens.len() != temporal.len() {
            return Err(Error::Precondition(format!(
                "{} tokens but {} temporal rows",
                tokens.len(),
                temporal.len()
            )));
        }
        Ok(TokenSequence { tokens, temporal })
    }

    /// Tokens with all-zero temporal features.
    pub fn untimed(tokens: Vec<TokenPair>) -> Self {
        let temporal = vec![TemporalFeatures::default(); tokens.len()];
        TokenSequence { tokens, temporal }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn window(&self, start: usize, len: usize) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens[start..start + len].to_vec(),
            temporal: self.temporal[start..start + len].to_vec(),
        }
    }
}

/// Which coarse subtoken the fine head conditions on during `ar_loss`.
pub enum CoarseConditioning<'a> {
    /// Drawn from the model's own coarse distribution at temperature 1.
    Sampled(&'a mut ChaCha8Rng),
    /// Explicit choices, one per predicted position (sequence order).
    Given(&'a [u32]),
    /// The ground-truth coarse subtoken (teacher forcing).
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct ArLoss {
    /// Mean over predicted positions of coarse plus fine negative log-likelihood.
    pub loss: Var,
    pub coarse_nll: Vec<f64>,
    pub fine_nll: Vec<f64>,
    /// Coarse subtokens the fine head was conditioned on.
    pub conditioned_on: Vec<u32>,
}

impl ArLoss {
    pub fn per_position(&self) -> Vec<f64> {
        self.coarse_nll.iter().zip(&self.fine_nll).map(|(c, f)| c + f).collect()
    }
}

#[derive(Debug, Clone)]
struct ArNet {
    embed_coarse: ParamId,
    embed_fine: ParamId,
    fuse: Linear,
    temporal: [ParamId; 5],
    backbone: TransformerStack,
    head_coarse: Linear,
    cross: CrossAttention,
    cross_norm: RmsNorm,
    head_fine: Linear,
}

#[derive(Debug, Clone)]
pub struct ArModel {
    pub cfg: ArConfig,
    pub params: ParamSet,
    net: ArNet,
}

impl ArModel {
    pub fn new(cfg: ArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (d, v) = (cfg.d_model, cfg.sub_vocab());
        let embed_coarse = ps.add("ar.embed_coarse", normal_tensor(&mut rng, &[v, d], INIT_STD));
        let embed_fine = ps.add("ar.embed_fine", normal_tensor(&mut rng, &[v, d], INIT_STD));
        let fuse = Linear::new(&mut ps, "ar.fuse", 2 * d, d, &mut rng);
        let names = ["minute", "hour", "weekday", "day", "month"];
        let temporal = std::array::from_fn(|i| {
            ps.add(
                format!("ar.temporal.{}", names[i]),
                normal_tensor(&mut rng, &[TEMPORAL_TABLE_ROWS[i], d], INIT_STD),
            )
        });
        let backbone = TransformerStack::new(&mut ps, "ar.backbone", cfg.n_layers, &cfg.attention(), &mut rng);
        let head_coarse = Linear::new(&mut ps, "ar.head_coarse", d, v, &mut rng);
        let cross = CrossAttention::new(&mut ps, "ar.cross", d, cfg.n_heads, &mut rng);
        let cross_norm = RmsNorm::new(&mut ps, "ar.cross_norm", d);
        let head_fine = Linear::new(&mut ps, "ar.head_fine", d, v, &mut rng);
        Ok(ArModel {
            cfg,
            params: ps,
            net: ArNet {
                embed_coarse,
                embed_fine,
                fuse,
                temporal,
                backbone,
                head_coarse,
                cross,
                cross_norm,
                head_fine,
            },
        })
    }

    pub fn from_params(cfg: ArConfig, params: &ParamSet) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.copy_from(params).map_err(Error::Checkpoint)?;
        Ok(m)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.net.head_coarse.weight, self.net.head_fine.weight)
    }

    pub fn embedding_ids(&self) -> (ParamId, ParamId) {
        (self.net.embed_coarse, self.net.embed_fine)
    }

    fn check_tokens(&self, tokens: &[TokenPair]) -> Result<()> {
        let v = self.cfg.sub_vocab() as u32;
        match tokens.iter().find(|t| t.coarse >= v || t.fine >= v) {
            Some(t) => Err(Error::Range(format!(
                "token ({}, {}) outside sub-vocabulary {v}",
                t.coarse, t.fine
            ))),
            None => Ok(()),
        }
    }

    /// `W_fuse [e_c(b^c); e_f(b^f)]` plus summed temporal embeddings, one row
    /// per token. Token dropout applies in training sessions.
    pub fn fuse(&self, s: &mut Session, tokens: &[TokenPair], temporal: &[TemporalFeatures]) -> Result<Var> {
        self.check_tokens(tokens)?;
        if tokens.len() != temporal.len() || tokens.is_empty() {
            return Err(Error::Precondition(
                "fuse needs matching, non-empty token and temporal rows".into(),
            ));
        }
        for t in temporal {
            t.validate()?;
        }
        let coarse: Vec<usize> = tokens.iter().map(|t| t.coarse as usize).collect();
        let fine: Vec<usize> = tokens.iter().map(|t| t.fine as usize).collect();
        let ec = s.g.embedding(s.p(self.net.embed_coarse), &coarse)?;
        let ef = s.g.embedding(s.p(self.net.embed_fine), &fine)?;
        let cat = s.g.concat(&[ec, ef], 1)?;
        let mut v = self.net.fuse.forward(s, cat)?;
        for (field, &table) in self.net.temporal.iter().enumerate() {
            let idx: Vec<usize> = temporal.iter().map(|t| t.indices()[field]).collect();
            let e = s.g.embedding(s.p(table), &idx)?;
            v = s.g.add(v, e)?;
        }
        s.row_dropout(v, self.cfg.token_dropout)
    }

    /// Causal backbone over fused rows. Every sequence in `layout` must fit
    /// in the context window.
    pub fn backbone(&self, s: &mut Session, fused: Var, layout: &RowLayout) -> Result<Var> {
        if let Some(&p) = layout.pos.iter().max() {
            if p >= self.cfg.max_context {
                return Err(Error::Range(format!(
                    "sequence of length {} exceeds the context window of {}",
                    p + 1,
                    self.cfg.max_context
                )));
            }
        }
        self.net.backbone.forward(s, fused, layout)
    }

    pub fn backbone_cached(&self, s: &mut Session, fused: Var, cache: &mut [crate::nn::KvCache]) -> Result<Var> {
        self.net.backbone.forward_cached(s, fused, cache)
    }

    pub fn empty_cache(&self) -> Vec<crate::nn::KvCache> {
        self.net.backbone.empty_cache()
    }

    /// `W_c h` for each row of `hidden`.
    pub fn coarse_logits(&self, s: &mut Session, hidden: Var) -> Result<Var> {
        self.net.head_coarse.forward(s, hidden)
    }

    /// `W_f RMSNorm(e_c(c) + CrossAttn(e_c(c), h))` for each row of `hidden`
    /// and its coarse choice `c`.
    pub fn fine_logits(&self, s: &mut Session, hidden: Var, coarse: &[u32]) -> Result<Var> {
        let v = self.cfg.sub_vocab() as u32;
        if let Some(&c) = coarse.iter().find(|&&c| c >= v) {
            return Err(Error::Range(format!("coarse choice {c} outside sub-vocabulary {v}")));
        }
        let idx: Vec<usize> = coarse.iter().map(|&c| c as usize).collect();
        let q = s.g.embedding(s.p(self.net.embed_coarse), &idx)?;
        let a = self.net.cross.forward(s, q, hidden)?;
        let u = s.g.add(q, a)?;
        let u = self.net.cross_norm.forward(s, u)?;
        self.net.head_fine.forward(s, u)
    }

    /// Teacher-forced objective over packed sequences: position `t` is
    /// predicted from tokens `< t`, and the loss is the mean over all
    /// predicted positions.
    pub fn ar_loss(
        &self,
        s: &mut Session,
        sequences: &[&TokenSequence],
        conditioning: CoarseConditioning<'_>,
    ) -> Result<ArLoss> {
        let mut inputs = Vec::new();
        let mut temporal = Vec::new();
        let mut targets = Vec::new();
        let mut lengths = Vec::new();
        for seq in sequences {
            if seq.len() < 2 {
                return Err(Error::Precondition(format!(
                    "sequence of length {} has nothing to predict",
                    seq.len()
                )));
            }
            let n = seq.len() - 1;
            inputs.extend_from_slice(&seq.tokens[..n]);
            temporal.extend_from_slice(&seq.temporal[..n]);
            targets.extend_from_slice(&seq.tokens[1..]);
            lengths.push(n);
        }
        self.check_tokens(&targets)?;
        let layout = RowLayout::packed(&lengths);
        let fused = self.fuse(s, &inputs, &temporal)?;
        let h = self.backbone(s, fused, &layout)?;

        let cl = self.coarse_logits(s, h)?;
        let c_logp = s.g.log_softmax(cl);
        let c_targets: Vec<usize> = targets.iter().map(|t| t.coarse as usize).collect();
        let c_pick = s.g.pick(c_logp, &c_targets)?;

        let chosen: Vec<u32> = match conditioning {
            CoarseConditioning::GroundTruth => targets.iter().map(|t| t.coarse).collect(),
            CoarseConditioning::Given(c) => {
                if c.len() != targets.len() {
                    return Err(Error::Precondition(format!(
                        "{} coarse choices for {} positions",
                        c.len(),
                        targets.len()
                    )));
                }
                c.to_vec()
            }
            CoarseConditioning::Sampled(rng) => {
                let probs = s.value(c_logp).map(f64::exp);
                probs
                    .to_rows()
                    .iter()
                    .map(|row| sample_index(row, rng.random::<f64>()) as u32)
                    .collect()
            }
        };
        let fl = self.fine_logits(s, h, &chosen)?;
        let f_logp = s.g.log_softmax(fl);
        let f_targets: Vec<usize> = targets.iter().map(|t| t.fine as usize).collect();
        let f_pick = s.g.pick(f_logp, &f_targets)?;

        let both = s.g.add(c_pick, f_pick)?;
        let mean = s.g.mean(both);
        let loss = s.g.neg(mean);
        Ok(ArLoss {
            loss,
            coarse_nll: s.value(c_pick).data().iter().map(|v| -v).collect(),
            fine_nll: s.value(f_pick).data().iter().map(|v| -v).collect(),
            conditioned_on: chosen,
        })
    }
}

/// Inverse-CDF draw from a probability vector with one uniform `u` in [0, 1).
/// Falls back to the last index with positive mass when rounding leaves
/// `u` beyond the total.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if target < acc && p > 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Trains a fresh model. Each step draws `batch_size` sequences with
/// replacement and crops those longer than the context window at a random
/// offset. `on_checkpoint` runs after every `checkpoint_every` steps.
pub fn train_ar_with(
    dataset: &[TokenSequence],
    cfg: ArConfig,
    train: TrainConfig,
    checkpoint_every: usize,
    on_checkpoint: &mut dyn FnMut(usize, &ArModel) -> Result<()>,
) -> Result<(ArModel, Vec<f64>)> {
    train.validate()?;
    if dataset.is_empty() || dataset.iter().any(|s| s.len() < 2) {
        return Err(Error::Precondition(
            "AR training needs sequences of length at least 2".into(),
        ));
    }
    let mut model = ArModel::new(cfg, train.seed)?;
    let mut opt = Optimizer::new(train.optim, &model.params, train.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xa5a5_0001);
    let span = cfg.max_context + 1;
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<TokenSequence> = (0..train.batch_size)
            .map(|_| {
                let seq = &dataset[rng.random_range(0..dataset.len())];
                if seq.len() > span {
                    seq.window(rng.random_range(0..=seq.len() - span), span)
                } else {
                    seq.clone()
                }
            })
            .collect();
        let refs: Vec<&TokenSequence> = batch.iter().collect();
        let mut s = Session::train(&model.params, rng.random());
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let out = model.ar_loss(&mut s, &refs, CoarseConditioning::Sampled(&mut sample_rng))?;
        let value = s.value(out.loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                component: "ar loss".into(),
            });
        }
        s.backward(out.loss)?;
        opt.step(&mut model.params, s.grads(), step);
        trace.push(value);
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok((model, trace))
}

pub fn train_ar(dataset: &[TokenSequence], cfg: ArConfig, train: TrainConfig) -> Result<(ArModel, Vec<f64>)> {
    train_ar_with(dataset, cfg, train, 0, &mut |_, _| Ok(()))
}

/// Analytic parameter breakdown for a `k`-bit code factorized into
/// `n_splits` equal subtokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterAudit {
    pub core: f64,
    pub vocab: f64,
    pub fusion: f64,
    pub total: f64,
    pub steps_per_token: usize,
}

pub fn count_parameters(cfg: &ArConfig, n_splits: usize) -> Result<ParameterAudit> {
    if n_splits == 0 || !cfg.k.is_multiple_of(n_splits) {
        return Err(Error::config(
            "n_splits",
            format!("{n_splits} does not divide k = {}", cfg.k),
        ));
    }
    let d = cfg.d_model as f64;
    let layers = cfg.n_layers as f64 * TransformerLayer::parameter_count(cfg.d_model, cfg.d_ff) as f64;
    let final_norm = d;
    let cross = 4.0 * d * d + d;
    let temporal = TEMPORAL_TABLE_ROWS.iter().sum::<usize>() as f64 * d;
    let core = layers + final_norm + cross + temporal;
    let sub = 2f64.powi((cfg.k / n_splits) as i32);
    let vocab = n_splits as f64 * sub * d * 2.0;
    let fusion = if n_splits >= 2 { n_splits as f64 * d * d } else { 0.0 };
    Ok(ParameterAudit {
        core,
        vocab,
        fusion,
        total: core + vocab + fusion,
        steps_per_token: n_splits,
    })
}
