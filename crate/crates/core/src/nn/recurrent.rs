use kline_tensor::{ParamSet, Tensor, Var};
use rand::Rng;

use super::{Linear, Session};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentCellConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl RecurrentCellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config(
                "recurrent",
                "input_dim and hidden_dim must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Minimal gated unit with a single forget gate:
///
/// ```text
/// f  = sigmoid(x W_f + h U_f + b_f)
/// c  = tanh(x W_h + (f * h) U_h + b_h)
/// h' = (1 - f) * h + f * c
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GatedRecurrent {
    pub wf: Linear,
    pub uf: Linear,
    pub wh: Linear,
    pub uh: Linear,
    pub hidden_dim: usize,
}

impl GatedRecurrent {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &RecurrentCellConfig, rng: &mut R) -> Self {
        let (i, h) = (cfg.input_dim, cfg.hidden_dim);
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |ps: &mut ParamSet, n: &str, rows: usize| {
            let id = ps.add(
                format!("{name}.{n}.weight"),
                super::uniform_tensor(rng, &[rows, h], bound),
            );
            Linear { weight: id, bias: None }
        };
        let mut wf = uniform(ps, "wf", i);
        let uf = uniform(ps, "uf", h);
        let mut wh = uniform(ps, "wh", i);
        let uh = uniform(ps, "uh", h);
        wf.bias = Some(ps.add(format!("{name}.wf.bias"), Tensor::zeros(vec![h])));
        wh.bias = Some(ps.add(format!("{name}.wh.bias"), Tensor::zeros(vec![h])));
        GatedRecurrent {
            wf,
            uf,
            wh,
            uh,
            hidden_dim: h,
        }
    }

    /// One update of the `[batch x hidden]` state with `[batch x input]` inputs.
    pub fn step(&self, s: &mut Session, x: Var, h: Var) -> Result<Var> {
        let a = self.wf.forward(s, x)?;
        let b = self.uf.forward(s, h)?;
        let f = s.g.add(a, b)?;
        let f = s.g.sigmoid(f);
        let fh = s.g.mul(f, h)?;
        let a = self.wh.forward(s, x)?;
        let b = self.uh.forward(s, fh)?;
        let c = s.g.add(a, b)?;
        let c = s.g.tanh(c);
        let keep = s.g.neg(f);
        let keep = s.g.add_scalar(keep, 1.0);
        let old = s.g.mul(keep, h)?;
        let new = s.g.mul(f, c)?;
        Ok(s.g.add(old, new)?)
    }

    /// Runs over `steps` (each `[batch x input]`) from a zero state and
    /// returns the final hidden state.
    pub fn run(&self, s: &mut Session, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(Error::Precondition(
                "recurrent input must have at least one step".into(),
            ));
        };
        let batch = s.g.shape(first)[0];
        let mut h = s.constant(Tensor::zeros(vec![batch, self.hidden_dim]));
        for &x in steps {
            h = self.step(s, x, h)?;
        }
        Ok(h)
    }
}

/// Recurrent cell plus a linear read-out of the final state. A classifier
/// applies a sigmoid to the single output; a regressor uses it as is.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentHead {
    pub cell: GatedRecurrent,
    pub out: Linear,
    pub sigmoid: bool,
}

impl RecurrentHead {
    pub fn classifier<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &RecurrentCellConfig, rng: &mut R) -> Self {
        Self::build(ps, name, cfg, 1, true, rng)
    }

    pub fn regressor<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cfg: &RecurrentCellConfig,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(ps, name, cfg, d_out, false, rng)
    }

    fn build<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cfg: &RecurrentCellConfig,
        d_out: usize,
        sigmoid: bool,
        rng: &mut R,
    ) -> Self {
        RecurrentHead {
            cell: GatedRecurrent::new(ps, &format!("{name}.cell"), cfg, rng),
            out: Linear::with_bias(ps, &format!("{name}.out"), cfg.hidden_dim, d_out, rng),
            sigmoid,
        }
    }

    /// `[batch x d_out]` predictions; probabilities for a classifier.
    pub fn forward(&self, s: &mut Session, steps: &[Var]) -> Result<Var> {
        let h = self.cell.run(s, steps)?;
        let y = self.out.forward(s, h)?;
        Ok(if self.sigmoid { s.g.sigmoid(y) } else { y })
    }

    /// Splits `[T x d_in]` sequences into per-step `[batch x d_in]` constants.
    pub fn steps_from_sequences(s: &mut Session, seqs: &[&[Vec<f64>]]) -> Result<Vec<Var>> {
        let Some(first) = seqs.first() else {
            return Err(Error::Precondition("empty batch".into()));
        };
        let t = first.len();
        let d = first.first().map_or(0, Vec::len);
        if t == 0 || seqs.iter().any(|q| q.len() != t || q.iter().any(|r| r.len() != d)) {
            return Err(Error::Precondition(
                "sequences must share a nonzero length and width".into(),
            ));
        }
        (0..t)
            .map(|step| {
                let data = seqs.iter().flat_map(|q| q[step].iter().copied()).collect();
                Ok(s.constant(Tensor::new(vec![seqs.len(), d], data)?))
            })
            .collect()
    }
}
