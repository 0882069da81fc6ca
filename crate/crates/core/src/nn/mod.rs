//! Network building blocks over the tensor graph.

mod attention;
mod recurrent;
mod transformer;

pub use attention::{
    causal_mask, rope_rotate, rope_tables, AttentionConfig, CausalAttention, CrossAttention, KvCache, RowLayout,
    ROPE_BASE,
};
pub use recurrent::{GatedRecurrent, RecurrentCellConfig, RecurrentHead};
pub use transformer::{FeedForward, TransformerLayer, TransformerStack};

use kline_tensor::gradcheck::{check_gradients, GradCheckReport};
use kline_tensor::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

/// Standard deviation of the normal initializer for projections and tables.
pub const INIT_STD: f64 = 0.02;

/// Epsilon inside the RMSNorm square root. Small enough that a unit-RMS
/// input is a fixed point to ~1e-12 in double precision.
pub const RMS_EPS: f64 = 1e-12;

/// One forward (and optionally backward) pass: a graph, the parameters bound
/// into it, and a dropout generator when training.
pub struct Session {
    pub g: Graph,
    vars: Vec<Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Session {
    /// Parameters tracked for gradients; dropout active, driven by `seed`.
    pub fn train(params: &ParamSet, seed: u64) -> Self {
        let mut g = Graph::new();
        let vars = g.bind(params);
        Session {
            g,
            vars,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Parameters tracked for gradients but dropout disabled. Used for
    /// gradient checks, which need a deterministic forward.
    pub fn grad_eval(params: &ParamSet) -> Self {
        let mut g = Graph::new();
        let vars = g.bind(params);
        Session {
            g,
            vars,
            dropout_rng: None,
        }
    }

    /// Evaluation: parameters are constants and dropout is off.
    pub fn eval(params: &ParamSet) -> Self {
        let mut g = Graph::new();
        let vars = g.bind_frozen(params);
        Session {
            g,
            vars,
            dropout_rng: None,
        }
    }

    /// Wraps an existing graph and bound parameter handles.
    pub fn from_parts(g: Graph, vars: Vec<Var>) -> Self {
        Session {
            g,
            vars,
            dropout_rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    /// Drops whole rows of a `[n x d]` input with probability `rate`.
    pub fn row_dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.g.shape(x)[0];
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let m = self.g.constant(Tensor::new(vec![n, 1], mask)?);
        Ok(self.g.mul(x, m)?)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        Ok(self.g.backward(loss)?)
    }

    pub fn grads(&self) -> Vec<Tensor> {
        self.g.grads_of(&self.vars)
    }
}

/// Finite-difference check of a loss built through a [`Session`]. Dropout is
/// off on both the analytic and numeric sides.
pub fn check_session_gradients<F>(params: &ParamSet, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    Ok(check_gradients(params, h, |g, vars| {
        let mut s = Session::from_parts(std::mem::take(g), vars.to_vec());
        let out = loss_fn(&mut s);
        *g = s.g;
        out.map_err(|e| TensorError::Invalid {
            op: "session loss",
            msg: e.to_string(),
        })
    })?)
}

/// Replaces every parameter with uniform draws in `[-bound, bound]`, giving
/// gradient checks well-scaled values instead of the small training init.
pub fn randomize_params<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, bound: f64) {
    for p in ps.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = uniform_tensor(rng, &shape, bound);
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("consistent shape")
}

/// `x W (+ b)` with `W: [in x out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: ps.add(format!("{name}.weight"), normal_tensor(rng, &[d_in, d_out], INIT_STD)),
            bias: None,
        }
    }

    pub fn with_bias<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let mut l = Self::new(ps, name, d_in, d_out, rng);
        l.bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        l
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.g.matmul(x, s.p(self.weight))?;
        match self.bias {
            Some(b) => Ok(s.g.add(y, s.p(b))?),
            None => Ok(y),
        }
    }
}

/// Root-mean-square normalization over the last axis with a learned gain.
#[derive(Debug, Clone, Copy)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        RmsNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::ones(vec![d])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = rms_normalize(&mut s.g, x)?;
        Ok(s.g.mul(n, s.p(self.gain))?)
    }
}

/// `x / sqrt(mean(x^2) + eps)` along the last axis, without gain.
pub fn rms_normalize(g: &mut Graph, x: Var) -> std::result::Result<Var, TensorError> {
    let axis = g.shape(x).len() - 1;
    let sq = g.square(x);
    let ms = g.mean_axis(sq, axis)?;
    let ms = g.add_scalar(ms, RMS_EPS);
    let rms = g.sqrt(ms);
    g.div(x, rms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_norm_fixed_point_and_unit_rms() {
        let mut ps = ParamSet::new();
        let norm = RmsNorm::new(&mut ps, "n", 4);
        let mut s = Session::eval(&ps);
        let x = s.constant(Tensor::new(vec![1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let y = norm.forward(&mut s, x).unwrap();
        assert!(s.value(y).max_abs_diff(s.value(x)) < 1e-11);

        let x = s.constant(Tensor::new(vec![2, 3], vec![3.0, -0.1, 7.0, 1e-3, 2e-3, -5e-4]).unwrap());
        let y = rms_normalize(&mut s.g, x).unwrap();
        let inputs = s.value(x).to_rows();
        for (row, input) in s.value(y).to_rows().iter().zip(&inputs) {
            let ms = input.iter().map(|v| v * v).sum::<f64>() / 3.0;
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
            let expected = (ms / (ms + RMS_EPS)).sqrt();
            assert!((rms - expected).abs() < 1e-12, "{rms} vs {expected}");
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let ps = ParamSet::new();
        let mut s = Session::eval(&ps);
        let x = s.constant(Tensor::ones(vec![4, 4]));
        assert_eq!(s.dropout(x, 0.5).unwrap(), x);
        let mut t = Session::train(&ps, 1);
        let x = t.constant(Tensor::ones(vec![50, 50]));
        let y = t.dropout(x, 0.5).unwrap();
        let vals = t.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
    }
}
