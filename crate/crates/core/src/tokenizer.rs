//! BSQ tokenizer: a transformer autoencoder whose per-bar latent is projected
//! onto the unit sphere and binarized into a coarse and a fine subtoken.

use kline_tensor::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kline::CHANNELS;
use crate::nn::{AttentionConfig, Linear, RowLayout, Session, TransformerStack};
use crate::train::{Optimizer, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsqConfig {
    /// Total code bits; the coarse and fine halves get `k / 2` each.
    pub k: usize,
    pub group_size: usize,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub lambda: f64,
    /// Scale `c` in the soft bit probability `sigmoid(c * xi_i)`.
    pub soft_scale: f64,
}

impl BsqConfig {
    pub fn full() -> Self {
        Self::with_bits(20, 5)
    }

    pub fn with_bits(k: usize, group_size: usize) -> Self {
        BsqConfig {
            k,
            group_size,
            beta: 0.05,
            gamma0: 1.0,
            gamma: 1.1,
            zeta: 0.05,
            lambda: 1.0,
            soft_scale: (k as f64).sqrt(),
        }
    }

    pub fn half(&self) -> usize {
        self.k / 2
    }

    /// Size of each subtoken vocabulary, `2^(k/2)`.
    pub fn sub_vocab(&self) -> usize {
        1 << self.half()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || !self.k.is_multiple_of(2) || self.k > 40 {
            return Err(Error::config(
                "bsq.k",
                format!("k must be even in [2, 40], got {}", self.k),
            ));
        }
        if self.group_size == 0 || !self.k.is_multiple_of(self.group_size) || self.group_size > 12 {
            return Err(Error::config(
                "bsq.group_size",
                format!(
                    "group size {} must divide k = {} (and be at most 12)",
                    self.group_size, self.k
                ),
            ));
        }
        for (name, w) in [
            ("bsq.beta", self.beta),
            ("bsq.gamma0", self.gamma0),
            ("bsq.gamma", self.gamma),
            ("bsq.zeta", self.zeta),
            ("bsq.lambda", self.lambda),
            ("bsq.soft_scale", self.soft_scale),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, format!("must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub bsq: BsqConfig,
}

impl TokenizerConfig {
    pub fn full() -> Self {
        TokenizerConfig {
            n_layers: 3,
            d_model: 256,
            d_ff: 512,
            n_heads: 4,
            dropout: 0.0,
            bsq: BsqConfig::full(),
        }
    }

    /// Desk-scale default used by tests and quick runs.
    pub fn tiny() -> Self {
        TokenizerConfig {
            n_layers: 1,
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            dropout: 0.0,
            bsq: BsqConfig::with_bits(16, 4),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            ffn_dropout: self.dropout,
            resid_dropout: self.dropout,
            attn_dropout: self.dropout,
            ..AttentionConfig::new(self.d_model, self.n_heads, self.d_ff)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("tokenizer.n_layers", "must be positive"));
        }
        self.attention().validate()?;
        self.bsq.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenPair {
    pub coarse: u32,
    pub fine: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    /// Unit-norm latent.
    pub xi: Vec<f64>,
    /// Entries in {-1, +1}.
    pub bits: Vec<f64>,
}

impl LatentCode {
    /// `bits / sqrt(k)`, the unit-norm vector the decoder consumes.
    pub fn quantized(&self) -> Vec<f64> {
        let s = 1.0 / (self.bits.len() as f64).sqrt();
        self.bits.iter().map(|b| b * s).collect()
    }

    /// `||xi - bits / sqrt(k)||_2`.
    pub fn distortion(&self) -> f64 {
        self.xi
            .iter()
            .zip(self.quantized())
            .map(|(x, q)| (x - q) * (x - q))
            .sum::<f64>()
            .sqrt()
    }
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn bsq_quantize(latent: &[f64]) -> Result<LatentCode> {
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quantization("latent has non-finite entries".into()));
    }
    let norm = latent.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Quantization(
            "cannot project a zero latent onto the sphere".into(),
        ));
    }
    let xi: Vec<f64> = latent.iter().map(|v| v / norm).collect();
    let bits = xi.iter().map(|&v| sign(v)).collect();
    Ok(LatentCode { xi, bits })
}

fn bits_to_index(bits: &[f64]) -> Result<u32> {
    bits.iter().try_fold(0u32, |acc, &b| {
        let bit = if b == 1.0 {
            1
        } else if b == -1.0 {
            0
        } else {
            return Err(Error::Range(format!("bit value {b} is not +1 or -1")));
        };
        Ok((acc << 1) | bit)
    })
}

/// First half of the bits is the coarse index, second half the fine index,
/// most significant bit first with `+1 -> 1`, `-1 -> 0`.
pub fn bits_to_token_pair(bits: &[f64]) -> Result<TokenPair> {
    if bits.is_empty() || !bits.len().is_multiple_of(2) || bits.len() > 40 {
        return Err(Error::Range(format!("bit vector of length {}", bits.len())));
    }
    let (c, f) = bits.split_at(bits.len() / 2);
    Ok(TokenPair {
        coarse: bits_to_index(c)?,
        fine: bits_to_index(f)?,
    })
}

pub fn token_pair_to_bits(pair: TokenPair, k: usize) -> Result<Vec<f64>> {
    let half = k / 2;
    if k == 0 || !k.is_multiple_of(2) || k > 40 {
        return Err(Error::Range(format!("k = {k}")));
    }
    let limit = 1u64 << half;
    if u64::from(pair.coarse) >= limit || u64::from(pair.fine) >= limit {
        return Err(Error::Range(format!(
            "token ({}, {}) outside [0, {limit})",
            pair.coarse, pair.fine
        )));
    }
    let expand = |idx: u32| {
        (0..half)
            .rev()
            .map(move |i| if (idx >> i) & 1 == 1 { 1.0 } else { -1.0 })
    };
    Ok(expand(pair.coarse).chain(expand(pair.fine)).collect())
}

/// Quantizes each latent row. With an identity encoder this is the whole
/// tokenizer forward pass.
pub fn quantize_rows(latents: &[Vec<f64>]) -> Result<(Vec<TokenPair>, Vec<LatentCode>)> {
    let codes = latents.iter().map(|l| bsq_quantize(l)).collect::<Result<Vec<_>>>()?;
    let tokens = codes
        .iter()
        .map(|c| bits_to_token_pair(&c.bits))
        .collect::<Result<_>>()?;
    Ok((tokens, codes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Full,
    CoarseOnly,
}

/// Mean per-sample entropy and entropy of the mean distribution, each summed
/// over bit groups. `xi` is `[n x k]`; each group of `group_size` bits is
/// treated as a categorical over `2^group_size` codes with independent soft
/// bits `sigmoid(scale * xi_i)`.
pub fn bsq_entropy_terms(g: &mut Graph, xi: Var, group_size: usize, scale: f64) -> Result<(Var, Var)> {
    let shape = g.shape(xi).to_vec();
    let (n, k) = (shape[0], shape[1]);
    if group_size == 0 || k % group_size != 0 {
        return Err(Error::config(
            "bsq.group_size",
            format!("{group_size} does not divide {k}"),
        ));
    }
    let codes = 1usize << group_size;
    let mut selector = vec![0.0; 2 * group_size * codes];
    for c in 0..codes {
        for i in 0..group_size {
            let on = (c >> (group_size - 1 - i)) & 1 == 1;
            let row = if on { i } else { group_size + i };
            selector[row * codes + c] = 1.0;
        }
    }
    let selector = g.constant(Tensor::new(vec![2 * group_size, codes], selector)?);
    let mut sample_terms = Vec::new();
    let mut codebook_terms = Vec::new();
    for j in 0..k / group_size {
        let a = g.narrow(xi, 1, j * group_size, group_size)?;
        let a = g.scale(a, scale);
        let p = g.sigmoid(a);
        let log_p = g.log(p);
        let na = g.neg(a);
        let q = g.sigmoid(na);
        let log_q = g.log(q);
        let both = g.concat(&[log_p, log_q], 1)?;
        let log_code = g.matmul(both, selector)?;
        let probs = g.exp(log_code);
        let plogp = g.mul(probs, log_code)?;
        let h = g.sum(plogp);
        sample_terms.push(g.scale(h, -1.0 / n as f64));
        let avg = g.mean_axis(probs, 0)?;
        let log_avg = g.log(avg);
        let alog_a = g.mul(avg, log_avg)?;
        let h = g.sum(alog_a);
        codebook_terms.push(g.neg(h));
    }
    let sum_all = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let sample = sum_all(g, &sample_terms)?;
    let codebook = sum_all(g, &codebook_terms)?;
    Ok((sample, codebook))
}

/// Loss components of one evaluation, all as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLoss {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub quant: f64,
    pub commitment: f64,
    pub sample_entropy: f64,
    pub codebook_entropy: f64,
}

impl TokenizerLoss {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("coarse", self.coarse),
            ("fine", self.fine),
            ("commitment", self.commitment),
            ("sample_entropy", self.sample_entropy),
            ("codebook_entropy", self.codebook_entropy),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Graph handles of a tokenizer loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerLossVars {
    pub total: Var,
    pub coarse: Var,
    pub fine: Var,
    pub quant: Var,
    pub commitment: Var,
    pub sample_entropy: Var,
    pub codebook_entropy: Var,
}

impl TokenizerLossVars {
    pub fn values(&self, g: &Graph) -> TokenizerLoss {
        let v = |x: Var| g.value(x).item();
        TokenizerLoss {
            total: v(self.total),
            coarse: v(self.coarse),
            fine: v(self.fine),
            quant: v(self.quant),
            commitment: v(self.commitment),
            sample_entropy: v(self.sample_entropy),
            codebook_entropy: v(self.codebook_entropy),
        }
    }
}

#[derive(Debug, Clone)]
struct TokenizerNet {
    embed: Linear,
    encoder: TransformerStack,
    to_latent: Linear,
    from_latent: Linear,
    decoder: TransformerStack,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub params: ParamSet,
    net: TokenizerNet,
}

fn matrix_tensor(rows: &[[f64; CHANNELS]]) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![rows.len(), CHANNELS],
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )?)
}

fn tensor_matrix(t: &Tensor) -> Vec<[f64; CHANNELS]> {
    t.data()
        .chunks(CHANNELS)
        .map(|c| {
            let mut row = [0.0; CHANNELS];
            row.copy_from_slice(c);
            row
        })
        .collect()
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let att = cfg.attention();
        let (d, k) = (cfg.d_model, cfg.bsq.k);
        let net = TokenizerNet {
            embed: Linear::with_bias(&mut ps, "tok.embed", CHANNELS, d, &mut rng),
            encoder: TransformerStack::new(&mut ps, "tok.encoder", cfg.n_layers, &att, &mut rng),
            to_latent: Linear::with_bias(&mut ps, "tok.to_latent", d, k, &mut rng),
            from_latent: Linear::with_bias(&mut ps, "tok.from_latent", k, d, &mut rng),
            decoder: TransformerStack::new(&mut ps, "tok.decoder", cfg.n_layers, &att, &mut rng),
            head: Linear::with_bias(&mut ps, "tok.head", d, CHANNELS, &mut rng),
        };
        Ok(Tokenizer { cfg, params: ps, net })
    }

    /// Rebuilds the architecture for `cfg` and loads `params` by name.
    pub fn from_params(cfg: TokenizerConfig, params: &ParamSet) -> Result<Self> {
        let mut t = Self::new(cfg, 0)?;
        t.params.copy_from(params).map_err(Error::Checkpoint)?;
        Ok(t)
    }

    /// Pre-sphere latents `[n x k]` for rows of `x` laid out by `layout`.
    pub fn latents(&self, s: &mut Session, x: Var, layout: &RowLayout) -> Result<Var> {
        let h = self.net.embed.forward(s, x)?;
        let h = self.net.encoder.forward(s, h, layout)?;
        self.net.to_latent.forward(s, h)
    }

    /// Decoder output `[n x 6]` for quantized codes `[n x k]`.
    pub fn decode_codes(&self, s: &mut Session, codes: Var, layout: &RowLayout) -> Result<Var> {
        let h = self.net.from_latent.forward(s, codes)?;
        let h = self.net.decoder.forward(s, h, layout)?;
        self.net.head.forward(s, h)
    }

    fn coarse_mask(&self) -> Tensor {
        let k = self.cfg.bsq.k;
        Tensor::new(vec![1, k], (0..k).map(|i| if i < k / 2 { 1.0 } else { 0.0 }).collect()).expect("mask shape")
    }

    /// Unit-sphere projection `z / ||z||` row-wise; errors on a zero row.
    fn sphere(&self, s: &mut Session, z: Var) -> Result<Var> {
        if s.value(z).to_rows().iter().any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Quantization("encoder produced a zero latent".into()));
        }
        let sq = s.g.square(z);
        let ss = s.g.sum_axis(sq, 1)?;
        let norm = s.g.sqrt(ss);
        Ok(s.g.div(z, norm)?)
    }

    pub fn encode(&self, window: &[[f64; CHANNELS]]) -> Result<(Vec<TokenPair>, Vec<LatentCode>)> {
        if window.is_empty() {
            return Err(Error::Precondition("cannot encode an empty window".into()));
        }
        let mut s = Session::eval(&self.params);
        let x = s.constant(matrix_tensor(window)?);
        let z = self.latents(&mut s, x, &RowLayout::single(window.len()))?;
        quantize_rows(&s.value(z).to_rows())
    }

    pub fn decode(&self, tokens: &[TokenPair], mode: DecodeMode) -> Result<Vec<[f64; CHANNELS]>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.cfg.bsq.k;
        let scale = 1.0 / (k as f64).sqrt();
        let mut data = Vec::with_capacity(tokens.len() * k);
        for &t in tokens {
            let bits = token_pair_to_bits(t, k)?;
            data.extend(bits.iter().enumerate().map(|(i, b)| {
                if mode == DecodeMode::CoarseOnly && i >= k / 2 {
                    0.0
                } else {
                    b * scale
                }
            }));
        }
        let mut s = Session::eval(&self.params);
        let codes = s.constant(Tensor::new(vec![tokens.len(), k], data)?);
        let y = self.decode_codes(&mut s, codes, &RowLayout::single(tokens.len()))?;
        Ok(tensor_matrix(s.value(y)))
    }

    /// Builds the composite objective over a batch of windows.
    pub fn loss_vars(&self, s: &mut Session, windows: &[&[[f64; CHANNELS]]]) -> Result<TokenizerLossVars> {
        let rows: Vec<[f64; CHANNELS]> = windows.iter().flat_map(|w| w.iter().copied()).collect();
        if rows.is_empty() {
            return Err(Error::Precondition("empty tokenizer batch".into()));
        }
        let lengths: Vec<usize> = windows.iter().map(|w| w.len()).collect();
        let layout = RowLayout::packed(&lengths);
        let bsq = self.cfg.bsq;
        let k = bsq.k;
        let n = rows.len();

        let x = s.constant(matrix_tensor(&rows)?);
        let z = self.latents(s, x, &layout)?;
        let xi = self.sphere(s, z)?;
        let q: Vec<f64> = s
            .value(xi)
            .data()
            .iter()
            .map(|&v| sign(v) / (k as f64).sqrt())
            .collect();
        let q = s.constant(Tensor::new(vec![n, k], q)?);
        let code = s.g.straight_through(xi, q)?;

        let full = self.decode_codes(s, code, &layout)?;
        let mask = s.constant(self.coarse_mask());
        let coarse_code = s.g.mul(code, mask)?;
        let coarse = self.decode_codes(s, coarse_code, &layout)?;

        let mse = |s: &mut Session, y: Var| -> Result<Var> {
            let d = s.g.sub(x, y)?;
            let d = s.g.square(d);
            Ok(s.g.mean(d))
        };
        let l_fine = mse(s, full)?;
        let l_coarse = mse(s, coarse)?;

        let diff = s.g.sub(xi, q)?;
        let diff = s.g.square(diff);
        let commit = s.g.sum(diff);
        let commit = s.g.scale(commit, 1.0 / n as f64);
        let (h_sample, h_codebook) = bsq_entropy_terms(&mut s.g, xi, bsq.group_size, bsq.soft_scale)?;

        let a = s.g.scale(commit, bsq.beta);
        let b = s.g.scale(h_sample, bsq.zeta * bsq.gamma0);
        let c = s.g.scale(h_codebook, -bsq.zeta * bsq.gamma);
        let quant = s.g.add(a, b)?;
        let quant = s.g.add(quant, c)?;
        let total = s.g.add(l_coarse, l_fine)?;
        let weighted = s.g.scale(quant, bsq.lambda);
        let total = s.g.add(total, weighted)?;
        Ok(TokenizerLossVars {
            total,
            coarse: l_coarse,
            fine: l_fine,
            quant,
            commitment: commit,
            sample_entropy: h_sample,
            codebook_entropy: h_codebook,
        })
    }

    /// Evaluation-mode loss over a set of windows.
    pub fn loss(&self, windows: &[&[[f64; CHANNELS]]]) -> Result<TokenizerLoss> {
        let mut s = Session::eval(&self.params);
        let vars = self.loss_vars(&mut s, windows)?;
        Ok(vars.values(&s.g))
    }

    /// Mean squared reconstruction error of `decode(encode(window))`.
    pub fn reconstruction_mse(&self, window: &[[f64; CHANNELS]], mode: DecodeMode) -> Result<f64> {
        let (tokens, _) = self.encode(window)?;
        let y = self.decode(&tokens, mode)?;
        let se: f64 = window
            .iter()
            .zip(&y)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)))
            .sum();
        Ok(se / (window.len() * CHANNELS) as f64)
    }
}

/// Trains a fresh tokenizer on normalized windows. Each step draws
/// `batch_size` windows uniformly with replacement.
pub fn train_tokenizer(
    windows: &[Vec<[f64; CHANNELS]>],
    cfg: TokenizerConfig,
    train: TrainConfig,
) -> Result<(Tokenizer, Vec<TokenizerLoss>)> {
    train.validate()?;
    if windows.is_empty() || windows.iter().any(|w| w.is_empty()) {
        return Err(Error::Precondition("tokenizer training needs non-empty windows".into()));
    }
    let mut tok = Tokenizer::new(cfg, train.seed)?;
    let mut opt = Optimizer::new(train.optim, &tok.params, train.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_70c0);
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<&[[f64; CHANNELS]]> = (0..train.batch_size)
            .map(|_| windows[rng.random_range(0..windows.len())].as_slice())
            .collect();
        let mut s = Session::train(&tok.params, rng.random());
        let vars = tok.loss_vars(&mut s, &batch)?;
        let loss = vars.values(&s.g);
        if let Some(component) = loss.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                component: format!("tokenizer {component}"),
            });
        }
        s.backward(vars.total)?;
        opt.step(&mut tok.params, s.grads(), step);
        trace.push(loss);
    }
    Ok((tok, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookUsage {
    pub coarse: f64,
    pub fine: f64,
}

/// Fraction of the `2^(k/2)` coarse and fine indices that occur in `tokens`.
pub fn codebook_usage(tokens: &[TokenPair], k: usize) -> Result<CodebookUsage> {
    if tokens.is_empty() {
        return Err(Error::Precondition("codebook usage of an empty corpus".into()));
    }
    let size = 1usize << (k / 2);
    let mut coarse = vec![false; size];
    let mut fine = vec![false; size];
    for t in tokens {
        let (c, f) = (t.coarse as usize, t.fine as usize);
        if c >= size || f >= size {
            return Err(Error::Range(format!("token ({c}, {f}) outside sub-vocabulary {size}")));
        }
        coarse[c] = true;
        fine[f] = true;
    }
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / size as f64;
    Ok(CodebookUsage {
        coarse: frac(&coarse),
        fine: frac(&fine),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_bits_are_a_fixed_point() {
        let bits = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let code = bsq_quantize(&bits.map(|b| 3.7 * b)).unwrap();
        assert_eq!(code.bits, bits);
        assert!(code.distortion() < 1e-15);
    }

    #[test]
    fn one_negative_coordinate_flips_one_bit() {
        let mut latent = vec![0.4; 8];
        latent[5] = -0.1;
        let code = bsq_quantize(&latent).unwrap();
        let neg: Vec<usize> = (0..8).filter(|&i| code.bits[i] < 0.0).collect();
        assert_eq!(neg, vec![5]);
    }

    #[test]
    fn zero_latent_is_a_quantization_error() {
        assert!(matches!(bsq_quantize(&[0.0; 4]), Err(Error::Quantization(_))));
        assert_eq!(bsq_quantize(&[0.0, 2.0]).unwrap().bits, vec![1.0, 1.0]);
    }

    #[test]
    fn token_pair_extremes() {
        assert_eq!(
            bits_to_token_pair(&[-1.0; 20]).unwrap(),
            TokenPair { coarse: 0, fine: 0 }
        );
        assert_eq!(
            bits_to_token_pair(&[1.0; 20]).unwrap(),
            TokenPair {
                coarse: 1023,
                fine: 1023
            }
        );
        assert!(token_pair_to_bits(TokenPair { coarse: 1024, fine: 0 }, 20).is_err());
    }

    #[test]
    fn exhaustive_round_trip_small_k() {
        for k in [2, 4, 6, 8] {
            let size = 1u32 << (k / 2);
            for coarse in 0..size {
                for fine in 0..size {
                    let pair = TokenPair { coarse, fine };
                    let bits = token_pair_to_bits(pair, k).unwrap();
                    assert_eq!(bits_to_token_pair(&bits).unwrap(), pair);
                }
            }
        }
        for coarse in 0..1024 {
            let pair = TokenPair {
                coarse,
                fine: 1023 - coarse,
            };
            assert_eq!(
                bits_to_token_pair(&token_pair_to_bits(pair, 20).unwrap()).unwrap(),
                pair
            );
        }
    }

    #[test]
    fn uniform_soft_bits_give_maximal_entropy() {
        let mut g = Graph::new();
        let xi = g.constant(Tensor::zeros(vec![3, 10]));
        let (hs, hc) = bsq_entropy_terms(&mut g, xi, 5, 20f64.sqrt()).unwrap();
        let per_group = 5.0 * std::f64::consts::LN_2;
        assert!((g.value(hs).item() - 2.0 * per_group).abs() < 1e-12);
        assert!((g.value(hc).item() - 2.0 * per_group).abs() < 1e-12);
    }

    #[test]
    fn usage_fractions() {
        let all: Vec<TokenPair> = (0..256).map(|c| TokenPair { coarse: c, fine: 0 }).collect();
        let u = codebook_usage(&all, 16).unwrap();
        assert_eq!(u.coarse, 1.0);
        assert_eq!(u.fine, 1.0 / 256.0);
        let one = vec![TokenPair { coarse: 3, fine: 9 }; 40];
        let u = codebook_usage(&one, 20).unwrap();
        assert_eq!((u.coarse, u.fine), (1.0 / 1024.0, 1.0 / 1024.0));
        assert!(codebook_usage(&[], 16).is_err());
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let tok = Tokenizer::new(TokenizerConfig::tiny(), 7).unwrap();
        let window: Vec<[f64; 6]> = (0..9).map(|i| [i as f64 * 0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).collect();
        let (a, codes) = tok.encode(&window).unwrap();
        let (b, _) = tok.encode(&window).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        for c in &codes {
            let n: f64 = c.xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
        assert_eq!(tok.decode(&a, DecodeMode::Full).unwrap().len(), 9);
        assert_eq!(tok.decode(&a, DecodeMode::CoarseOnly).unwrap().len(), 9);
    }
}
