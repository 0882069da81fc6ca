use crate::params::ParamSet;
use crate::tensor::{matmul_raw, transpose_raw};
use crate::{Result, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    BroadcastTo(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Pick { input: Var, indices: Vec<usize> },
    MaskedFill { input: Var, mask: Vec<bool> },
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are append-only, so insertion order is a topological order and the
/// graph is acyclic by construction.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records every parameter as a gradient-tracking leaf, in set order.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        params.iter().map(|p| self.leaf(p.value.clone())).collect()
    }

    /// Records every parameter as a constant, for evaluation-only passes.
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Vec<Var> {
        params.iter().map(|p| self.constant(p.value.clone())).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary (numpy-style broadcasting) ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::shape(name, &sa, &sb))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        // Shapes always match, so this cannot fail.
        self.mul(a, a).expect("same-shape mul")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    // ---- linear algebra / layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![sa[0], sb[1]], data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("expects 2-D, got {s:?}")));
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], data), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Narrow { input: a, axis, start },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} on {s0:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        match broadcast_shape(&s, shape) {
            Some(out) if out == shape => {}
            _ => return Err(TensorError::shape("broadcast_to", &s, shape)),
        }
        let src = self.value(a).data();
        let data = broadcast_index(shape, &s).iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::BroadcastTo(a), rg))
    }

    // ---- reductions / normalizers (last axis) ----

    /// Softmax over the last axis; each row has its max subtracted first.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} on {s:?}")));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..s[axis] {
                let base = (o * s[axis] + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis(a), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---- indexing ----

    /// Rows of a `[V x d]` table selected by `indices`, giving `[n x d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid(
                "embedding",
                format!("table must be 2-D, got {s:?}"),
            ));
        }
        if indices.is_empty() {
            return Err(TensorError::invalid("embedding", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid(
                "embedding",
                format!("index {bad} out of range for {} rows", s[0]),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), s[1]], data),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = a[i, indices[i]]` for a `[n x c]` input, giving `[n x 1]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || indices.len() != s[0] {
            return Err(TensorError::shape("pick", &s, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(TensorError::invalid(
                "pick",
                format!("column {bad} out of range for {} columns", s[1]),
            ));
        }
        let x = self.value(a);
        let data = indices.iter().enumerate().map(|(r, &c)| x.get2(r, c)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], 1], data),
            Op::Pick {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true with `value`; those entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(TensorError::shape("masked_fill", x.shape(), &[mask.len()]));
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                input: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    // ---- gradient plumbing ----

    /// Copy of `a` that is cut from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Forward value of `quantized` with the identity Jacobian routed to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sq = self.shape(quantized);
        if sx != sq {
            return Err(TensorError::shape("straight_through", sx, sq));
        }
        let value = self.value(quantized).clone();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Applies the recorded backward rules from a scalar `loss`.
    ///
    /// Gradients of earlier calls are discarded. Every gradient-tracking node
    /// reachable from the loss ends up with `d loss / d node`; contributions
    /// from repeated uses are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient recorded by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients for bound parameters, zero-filled where no gradient reached.
    pub fn grads_of(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec())))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, reduce_to(g, out.shape(), self.shape(*a)));
                let mut gb = reduce_to(g, out.shape(), self.shape(*b));
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ia = broadcast_index(out.shape(), va.shape());
                let ib = broadcast_index(out.shape(), vb.shape());
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g.iter().zip(&ib).map(|(g, &j)| g * vb.data()[j]).collect();
                    acc(*a, reduce_to(&ga, out.shape(), va.shape()));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g.iter().zip(&ia).map(|(g, &j)| g * va.data()[j]).collect();
                    acc(*b, reduce_to(&gb, out.shape(), vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ia = broadcast_index(out.shape(), va.shape());
                let ib = broadcast_index(out.shape(), vb.shape());
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g.iter().zip(&ib).map(|(g, &j)| g / vb.data()[j]).collect();
                    acc(*a, reduce_to(&ga, out.shape(), va.shape()));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(ia.iter().zip(&ib))
                        .map(|(g, (&i, &j))| {
                            let y = vb.data()[j];
                            -g * va.data()[i] / (y * y)
                        })
                        .collect();
                    acc(*b, reduce_to(&gb, out.shape(), vb.shape()));
                }
            }
            Op::Neg(a) => acc(*a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => acc(*a, zip_map(g, out.data(), |g, y| g * y)),
            Op::Log(a) => acc(*a, zip_map(g, self.value(*a).data(), |g, x| g / x)),
            Op::Sqrt(a) => acc(*a, zip_map(g, out.data(), |g, y| g * 0.5 / y)),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out.data(), |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, zip_map(g, out.data(), |g, y| g * (1.0 - y * y))),
            Op::Silu(a) => acc(
                *a,
                zip_map(g, self.value(*a).data(), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G . B^T
                    let bt = transpose_raw(vb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    // dB = A^T . G
                    let at = transpose_raw(va.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = out.shape();
                acc(*a, transpose_raw(g, s[0], s[1]));
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, inner) = outer_inner(s, *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, gi);
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis] * inner;
                    if self.requires_grad(*v) {
                        let mut gi = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gi.extend_from_slice(&g[base..base + n]);
                        }
                        acc(*v, gi);
                    }
                    offset += n;
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gi.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                acc(*a, gi);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gi.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = g - y.exp() * s;
                    }
                }
                acc(*a, gi);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(input) | Op::BroadcastTo(input) => {
                let si = self.shape(*input);
                if matches!(node.op, Op::SumAxis(_)) {
                    let idx = broadcast_index(si, out.shape());
                    acc(*input, idx.iter().map(|&j| g[j]).collect());
                } else {
                    acc(*input, reduce_to(g, out.shape(), si));
                }
            }
            Op::Embedding { table, indices } => {
                let d = out.cols();
                let mut gt = vec![0.0; self.value(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::Pick { input, indices } => {
                let c = self.value(*input).cols();
                let mut gi = vec![0.0; self.value(*input).len()];
                for (r, &j) in indices.iter().enumerate() {
                    gi[r * c + j] = g[r];
                }
                acc(*input, gi);
            }
            Op::MaskedFill { input, mask } => {
                acc(
                    *input,
                    g.iter().zip(mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect(),
                );
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let offset = out.len() - src.len();
    let mut strides = vec![0usize; out.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        strides[d + offset] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    let mut idx = vec![0usize; out.len()];
    let mut result = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        result.push(cur);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    result
}

/// Sums a gradient of shape `out` down to the broadcast source shape `src`.
fn reduce_to(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if out == src {
        return g.to_vec();
    }
    let mut r = vec![0.0; src.iter().product()];
    for (gi, j) in g.iter().zip(broadcast_index(out, src)) {
        r[j] += gi;
    }
    r
}
