use kline_tensor::{ParamSet, Var};
use rand::Rng;

use super::{AttentionConfig, CausalAttention, KvCache, Linear, RmsNorm, RowLayout, Session};
use crate::Result;

/// SwiGLU feed-forward: `(silu(x W_gate) * (x W_up)) W_down`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForward {
            gate: Linear::new(ps, &format!("{name}.gate"), d, d_ff, rng),
            up: Linear::new(ps, &format!("{name}.up"), d, d_ff, rng),
            down: Linear::new(ps, &format!("{name}.down"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, dropout: f64) -> Result<Var> {
        let a = self.gate.forward(s, x)?;
        let a = s.g.silu(a);
        let b = self.up.forward(s, x)?;
        let h = s.g.mul(a, b)?;
        let h = s.dropout(h, dropout)?;
        self.down.forward(s, h)
    }
}

/// Pre-norm block: `x + Attn(RMSNorm(x))`, then `x + FFN(RMSNorm(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub norm1: RmsNorm,
    pub attn: CausalAttention,
    pub norm2: RmsNorm,
    pub ffn: FeedForward,
    pub cfg: AttentionConfig,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        TransformerLayer {
            norm1: RmsNorm::new(ps, &format!("{name}.norm1"), cfg.d_model),
            attn: CausalAttention::new(ps, &format!("{name}.attn"), cfg, rng),
            norm2: RmsNorm::new(ps, &format!("{name}.norm2"), cfg.d_model),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
            cfg: *cfg,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, layout: &RowLayout) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, h, layout, self.cfg.attn_dropout)?;
        self.finish(s, x, a)
    }

    pub fn forward_cached(&self, s: &mut Session, x: Var, cache: &mut KvCache) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attn.forward_cached(s, h, cache)?;
        self.finish(s, x, a)
    }

    fn finish(&self, s: &mut Session, x: Var, attn_out: Var) -> Result<Var> {
        let a = s.dropout(attn_out, self.cfg.resid_dropout)?;
        let x = s.g.add(x, a)?;
        let h = self.norm2.forward(s, x)?;
        let f = self.ffn.forward(s, h, self.cfg.ffn_dropout)?;
        let f = s.dropout(f, self.cfg.resid_dropout)?;
        Ok(s.g.add(x, f)?)
    }

    /// Scalar parameter count of one layer.
    pub fn parameter_count(d_model: usize, d_ff: usize) -> usize {
        4 * d_model * d_model + 3 * d_model * d_ff + 2 * d_model
    }
}

/// Layers followed by a final RMSNorm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: RmsNorm,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        n_layers: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        TransformerStack {
            layers,
            final_norm: RmsNorm::new(ps, &format!("{name}.final_norm"), cfg.d_model),
        }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var, layout: &RowLayout) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(s, x, layout)?;
        }
        self.final_norm.forward(s, x)
    }

    pub fn forward_cached(&self, s: &mut Session, mut x: Var, caches: &mut [KvCache]) -> Result<Var> {
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            x = layer.forward_cached(s, x, cache)?;
        }
        self.final_norm.forward(s, x)
    }

    pub fn empty_cache(&self) -> Vec<KvCache> {
        vec![KvCache::default(); self.layers.len()]
    }
}
