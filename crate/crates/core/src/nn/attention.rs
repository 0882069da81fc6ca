use kline_tensor::{Graph, ParamSet, Tensor, Var};
use rand::Rng;

use super::{Linear, Session};
use crate::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub ffn_dropout: f64,
    pub resid_dropout: f64,
    pub attn_dropout: f64,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        AttentionConfig {
            d_model,
            n_heads,
            d_ff,
            ffn_dropout: 0.0,
            resid_dropout: 0.0,
            attn_dropout: 0.0,
            causal: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::config("attention", "d_model, n_heads and d_ff must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "attention.n_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(
                "attention.head_dim",
                format!("rotary embedding needs an even head dimension, got {}", self.head_dim()),
            ));
        }
        for (name, p) in [
            ("ffn_dropout", self.ffn_dropout),
            ("resid_dropout", self.resid_dropout),
            ("attn_dropout", self.attn_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(name, format!("{p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Sequence membership and position of each row of a packed `[n x d]` input.
/// Rows attend only within their own sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    pub seq: Vec<usize>,
    pub pos: Vec<usize>,
}

impl RowLayout {
    pub fn single(len: usize) -> Self {
        Self::range(0, len)
    }

    /// One sequence, positions `start..start + len`.
    pub fn range(start: usize, len: usize) -> Self {
        RowLayout {
            seq: vec![0; len],
            pos: (start..start + len).collect(),
        }
    }

    /// Sequences of the given lengths packed back to back.
    pub fn packed(lengths: &[usize]) -> Self {
        let mut seq = Vec::new();
        let mut pos = Vec::new();
        for (s, &n) in lengths.iter().enumerate() {
            seq.extend(std::iter::repeat_n(s, n));
            pos.extend(0..n);
        }
        RowLayout { seq, pos }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Row-major `[queries x keys]` mask; `true` means the key is hidden.
pub fn causal_mask(queries: &RowLayout, keys: &RowLayout, causal: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(queries.len() * keys.len());
    for (qs, qp) in queries.seq.iter().zip(&queries.pos) {
        for (ks, kp) in keys.seq.iter().zip(&keys.pos) {
            mask.push(qs != ks || (causal && kp > qp));
        }
    }
    mask
}

/// Constant tables for rotating `[n x n_heads*d_head]` rows in place:
/// `rope(x) = x * cos + (x P) * sin_signed`, pairing column `i` of each head
/// with column `i + d_head/2`.
pub fn rope_tables(positions: &[usize], d_head: usize, n_heads: usize) -> (Tensor, Tensor, Tensor) {
    let d = d_head * n_heads;
    let half = d_head / 2;
    let n = positions.len();
    let mut cos = vec![0.0; n * d];
    let mut sin = vec![0.0; n * d];
    for (r, &p) in positions.iter().enumerate() {
        for c in 0..d {
            let i = c % d_head;
            let j = i % half;
            let theta = p as f64 * ROPE_BASE.powf(-2.0 * j as f64 / d_head as f64);
            cos[r * d + c] = theta.cos();
            sin[r * d + c] = if i < half { -theta.sin() } else { theta.sin() };
        }
    }
    let mut perm = vec![0.0; d * d];
    for c in 0..d {
        let head = c / d_head;
        let i = c % d_head;
        let partner = head * d_head + if i < half { i + half } else { i - half };
        perm[partner * d + c] = 1.0;
    }
    (
        Tensor::new(vec![n, d], cos).expect("rope cos"),
        Tensor::new(vec![n, d], sin).expect("rope sin"),
        Tensor::new(vec![d, d], perm).expect("rope perm"),
    )
}

/// Rotary position embedding of `[n x n_heads*d_head]` rows at `positions`.
pub fn rope_rotate(g: &mut Graph, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != positions.len() || !shape[1].is_multiple_of(n_heads) {
        return Err(Error::config(
            "rope",
            format!("input {shape:?} with {} positions", positions.len()),
        ));
    }
    let d_head = shape[1] / n_heads;
    if !d_head.is_multiple_of(2) {
        return Err(Error::config("rope", format!("odd head dimension {d_head}")));
    }
    let (cos, sin, perm) = rope_tables(positions, d_head, n_heads);
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let perm = g.constant(perm);
    let a = g.mul(x, cos)?;
    let swapped = g.matmul(x, perm)?;
    let b = g.mul(swapped, sin)?;
    Ok(g.add(a, b)?)
}

/// Per-layer cache of rotated keys and values for incremental decoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-head self-attention with rotary queries/keys.
#[derive(Debug, Clone, Copy)]
pub struct CausalAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub causal: bool,
}

impl CausalAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        CausalAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d, d, rng),
            n_heads: cfg.n_heads,
            causal: cfg.causal,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, layout: &RowLayout, attn_dropout: f64) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, layout, attn_dropout)?.0)
    }

    /// Also returns the per-head `[queries x keys]` attention probabilities.
    pub fn forward_with_weights(
        &self,
        s: &mut Session,
        x: Var,
        layout: &RowLayout,
        attn_dropout: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let q = rope_rotate(&mut s.g, q, &layout.pos, self.n_heads)?;
        let k = rope_rotate(&mut s.g, k, &layout.pos, self.n_heads)?;
        let mask = causal_mask(layout, layout, self.causal);
        let (heads, weights) = self.attend(s, q, k, v, &mask, attn_dropout)?;
        Ok((self.wo.forward(s, heads)?, weights))
    }

    /// Processes new rows of a single sequence after the cached prefix and
    /// appends their rotated keys and values to `cache`.
    pub fn forward_cached(&self, s: &mut Session, x: Var, cache: &mut KvCache) -> Result<Var> {
        let n = s.g.shape(x)[0];
        let start = cache.len();
        let queries = RowLayout::range(start, n);
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let q = rope_rotate(&mut s.g, q, &queries.pos, self.n_heads)?;
        let mut k = rope_rotate(&mut s.g, k, &queries.pos, self.n_heads)?;
        let mut v = v;
        if let (Some(ck), Some(cv)) = (cache.keys.clone(), cache.values.clone()) {
            let ck = s.g.constant(ck);
            let cv = s.g.constant(cv);
            k = s.g.concat(&[ck, k], 0)?;
            v = s.g.concat(&[cv, v], 0)?;
        }
        let keys = RowLayout::range(0, start + n);
        let mask = causal_mask(&queries, &keys, self.causal);
        let (heads, _) = self.attend(s, q, k, v, &mask, 0.0)?;
        cache.keys = Some(s.value(k).clone());
        cache.values = Some(s.value(v).clone());
        self.wo.forward(s, heads)
    }

    fn attend(
        &self,
        s: &mut Session,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        attn_dropout: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let d = s.g.shape(q)[1];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = s.g.narrow(q, 1, h * dh, dh)?;
            let kh = s.g.narrow(k, 1, h * dh, dh)?;
            let vh = s.g.narrow(v, 1, h * dh, dh)?;
            let kt = s.g.transpose(kh)?;
            let scores = s.g.matmul(qh, kt)?;
            let scores = s.g.scale(scores, scale);
            let scores = s.g.masked_fill(scores, mask, f64::NEG_INFINITY)?;
            let probs = s.g.softmax(scores);
            weights.push(probs);
            let probs = s.dropout(probs, attn_dropout)?;
            outs.push(s.g.matmul(probs, vh)?);
        }
        let heads = if outs.len() == 1 {
            outs[0]
        } else {
            s.g.concat(&outs, 1)?
        };
        Ok((heads, weights))
    }
}

/// Multi-head attention where row `i` of the query attends to the single
/// memory row `i` (key = value = memory), followed by an output projection.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        CrossAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d, d, rng),
            n_heads,
        }
    }

    pub fn forward(&self, s: &mut Session, query: Var, memory: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, query, memory)?.0)
    }

    /// Returns the projected output and the `[n*heads x 1]` attention weights.
    pub fn forward_with_weights(&self, s: &mut Session, query: Var, memory: Var) -> Result<(Var, Var)> {
        let qs = s.g.shape(query).to_vec();
        let ms = s.g.shape(memory).to_vec();
        if qs != ms || qs.len() != 2 {
            return Err(Error::Tensor(kline_tensor::TensorError::Shape {
                op: "cross_attention",
                lhs: qs,
                rhs: ms,
            }));
        }
        let (n, d) = (qs[0], qs[1]);
        let dh = d / self.n_heads;
        let q = self.wq.forward(s, query)?;
        let k = self.wk.forward(s, memory)?;
        let v = self.wv.forward(s, memory)?;
        // One key per (row, head): scores are [n*heads x 1] and the softmax
        // runs over that single slot.
        let qk = s.g.mul(q, k)?;
        let qk = s.g.reshape(qk, &[n * self.n_heads, dh])?;
        let scores = s.g.sum_axis(qk, 1)?;
        let scores = s.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = s.g.softmax(scores);
        let vh = s.g.reshape(v, &[n * self.n_heads, dh])?;
        let mixed = s.g.mul(vh, w)?;
        let mixed = s.g.reshape(mixed, &[n, d])?;
        Ok((self.wo.forward(s, mixed)?, w))
    }
}
