//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! Programs are written once against [`Ops`]. Running them with [`Eager`]
//! evaluates directly; running them on a [`Tape`] records every node and
//! computes the same values through the same kernels, so recording never
//! changes a single bit of the forward output.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::ChunkMask;
use crate::tensor::{self, Scalar, Tensor};

/// The differentiable operation set.
pub trait Ops<S: Scalar> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<S>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<S>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: S) -> Result<Self::V>;
    fn relu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn masked_softmax(&mut self, logits: &Self::V, mask: Option<&ChunkMask>) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: S) -> Result<Self::V>;
    fn causal_conv1d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat_time(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn tail_slice(&mut self, a: &Self::V, s: usize) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    /// Mean squared error as a `[1]` tensor.
    fn mse(&mut self, pred: &Self::V, target: &Self::V) -> Result<Self::V>;
    /// Sum of all elements as a `[1]` tensor.
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;
}

/// Direct evaluation, no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<S: Scalar> Ops<S> for Eager {
    type V = Tensor<S>;

    fn constant(&mut self, t: Tensor<S>) -> Tensor<S> {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor<S>) -> &'a Tensor<S> {
        v
    }
    fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::matmul(a, b)
    }
    fn matmul_nt(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::matmul_nt(a, b)
    }
    fn transpose(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::transpose(a)
    }
    fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::add(a, b)
    }
    fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::sub(a, b)
    }
    fn scale(&mut self, a: &Tensor<S>, s: S) -> Result<Tensor<S>> {
        Ok(tensor::scale(a, s))
    }
    fn relu(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(tensor::relu(a))
    }
    fn add_row(&mut self, x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::add_row(x, bias)
    }
    fn masked_softmax(&mut self, logits: &Tensor<S>, mask: Option<&ChunkMask>) -> Result<Tensor<S>> {
        tensor::masked_softmax(logits, mask)
    }
    fn layer_norm(&mut self, x: &Tensor<S>, g: &Tensor<S>, b: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        tensor::layer_norm(x, g, b, eps)
    }
    fn causal_conv1d(&mut self, x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::causal_conv1d(x, w, b)
    }
    fn concat_time(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        tensor::concat_time(a, b)
    }
    fn tail_slice(&mut self, a: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
        Ok(tensor::tail_slice(a, s))
    }
    fn slice_cols(&mut self, a: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
        tensor::slice_cols(a, start, len)
    }
    fn concat_cols(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        tensor::concat_cols(&refs)
    }
    fn mse(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(Tensor::scalar(tensor::mse(pred, target)?))
    }
    fn sum(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(Tensor::scalar(a.sum()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, S),
    Relu(Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    Conv(Var, Var, Var),
    ConcatTime(Var, Var),
    SliceTime(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Mse(Var, Var),
    Sum(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::AddRow(..) => "add_row",
            Op::Softmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv(..) => "causal_conv1d",
            Op::ConcatTime(..) => "concat_time",
            Op::SliceTime(..) => "tail_slice",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<String>,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    #[cfg(test)]
    corrupt: Option<&'static str>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            #[cfg(test)]
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable input; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<S>) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(name.into());
        v
    }

    pub fn get(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. `output`) back to every node.
    pub fn backward(&self, output: Var, seed: &Tensor<S>) -> Result<Adjoints<'_, S>> {
        let out = self.get(output);
        if out.shape() != seed.shape() {
            return Err(Error::Autodiff(format!(
                "seed shape {:?} does not match output node {} shape {:?}",
                seed.shape(),
                output.0,
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(idx, node, &g, &mut grads)
                .map_err(|e| Error::Autodiff(format!("node {} ({}): {}", idx, node.op.name(), e)))?;
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads, tape: self })
    }

    fn propagate(
        &self,
        _idx: usize,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        #[allow(unused_mut)]
        let mut contributions: Vec<(Var, Tensor<S>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, tensor::matmul_nt(g, val(*b))?),
                (*b, tensor::matmul(&tensor::transpose(val(*a))?, g)?),
            ],
            Op::MatMulNt(a, b) => vec![
                (*a, tensor::matmul(g, val(*b))?),
                (*b, tensor::matmul(&tensor::transpose(g)?, val(*a))?),
            ],
            Op::Transpose(a) => vec![(*a, tensor::transpose(g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Scale(a, s) => vec![(*a, tensor::scale(g, *s))],
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::AddRow(x, b) => {
                let (_, d) = g.dims2()?;
                let mut gb = vec![S::zero(); d];
                for row in g.data().chunks(d.max(1)) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(vec![d], gb)?)]
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let tk = *p.shape().last().unwrap_or(&0);
                let mut out = vec![S::zero(); p.len()];
                if tk > 0 {
                    for ((prow, grow), orow) in p
                        .data()
                        .chunks(tk)
                        .zip(g.data().chunks(tk))
                        .zip(out.chunks_mut(tk))
                    {
                        let dot = prow
                            .iter()
                            .zip(grow)
                            .fold(S::zero(), |acc, (&pv, &gv)| acc + pv * gv);
                        for ((o, &pv), &gv) in orow.iter_mut().zip(prow).zip(grow) {
                            *o = pv * (gv - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(p.shape().to_vec(), out)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (t, d) = xhat.dims2()?;
                let gam = val(*gamma).data();
                let n = S::from_f64(d as f64);
                let mut dx = Vec::with_capacity(t * d);
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..t {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat.data()[r * d..(r + 1) * d];
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for c in 0..d {
                        let dh = grow[c] * gam[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hrow[c];
                        dgamma[c] = dgamma[c] + grow[c] * hrow[c];
                        dbeta[c] = dbeta[c] + grow[c];
                    }
                    let k = rstd[r] / n;
                    for c in 0..d {
                        let dh = grow[c] * gam[c];
                        dx.push(k * (n * dh - sum_dh - hrow[c] * sum_dh_h));
                    }
                }
                vec![
                    (*x, Tensor::new(vec![t, d], dx)?),
                    (*gamma, Tensor::new(vec![d], dgamma)?),
                    (*beta, Tensor::new(vec![d], dbeta)?),
                ]
            }
            Op::Conv(x, w, b) => {
                let xv = val(*x);
                let wv = val(*w);
                let (tx, din) = xv.dims2()?;
                let (t_out, dout) = g.dims2()?;
                let k = wv.shape()[0];
                // per-tap transposed weights `[dout × din]` keep every inner loop contiguous
                let wt: Vec<Tensor<S>> = (0..k)
                    .map(|j| {
                        let tap = Tensor::new(vec![din, dout], wv.data()[j * din * dout..(j + 1) * din * dout].to_vec())?;
                        tensor::transpose(&tap)
                    })
                    .collect::<Result<_>>()?;
                let mut dx = vec![S::zero(); tx * din];
                let mut dw = vec![S::zero(); wv.len()];
                let mut db = vec![S::zero(); dout];
                for t in 0..t_out {
                    let grow = &g.data()[t * dout..(t + 1) * dout];
                    for (acc, &gv) in db.iter_mut().zip(grow) {
                        *acc = *acc + gv;
                    }
                    for (j, wj) in wt.iter().enumerate() {
                        let dxrow = &mut dx[(t + j) * din..(t + j + 1) * din];
                        for (o, &gv) in grow.iter().enumerate() {
                            let wrow = &wj.data()[o * din..(o + 1) * din];
                            for (d, &wq) in dxrow.iter_mut().zip(wrow) {
                                *d = *d + wq * gv;
                            }
                        }
                        let xrow = &xv.data()[(t + j) * din..(t + j + 1) * din];
                        for (i, &xi) in xrow.iter().enumerate() {
                            let base = (j * din + i) * dout;
                            for (dwq, &gv) in dw[base..base + dout].iter_mut().zip(grow) {
                                *dwq = *dwq + xi * gv;
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(vec![tx, din], dx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), dw)?),
                    (*b, Tensor::new(vec![dout], db)?),
                ]
            }
            Op::ConcatTime(a, b) => {
                let na = val(*a).frames();
                let nb = val(*b).frames();
                vec![
                    (*a, tensor::slice_time(g, 0, na)?),
                    (*b, tensor::slice_time(g, na, nb)?),
                ]
            }
            Op::SliceTime(a, start) => {
                let src = val(*a);
                let stride = src.frame_stride();
                let mut data = vec![S::zero(); src.len()];
                data[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(src.shape().to_vec(), data)?)]
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (t, d) = src.dims2()?;
                let (_, len) = g.dims2()?;
                let mut data = vec![S::zero(); t * d];
                for r in 0..t {
                    data[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![(*a, Tensor::new(vec![t, d], data)?)]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let w = val(*p).dims2()?.1;
                    out.push((*p, tensor::slice_cols(g, start, w)?));
                    start += w;
                }
                out
            }
            Op::Mse(p, t) => {
                let pv = val(*p);
                let tv = val(*t);
                let k = g.data()[0] * S::from_f64(2.0 / pv.len() as f64);
                let d: Vec<S> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| (a - b) * k)
                    .collect();
                let gp = Tensor::new(pv.shape().to_vec(), d)?;
                let gt = gp.map(|v| -v);
                vec![(*p, gp), (*t, gt)]
            }
            Op::Sum(a) => {
                let src = val(*a);
                vec![(*a, Tensor::full(src.shape(), g.data()[0]))]
            }
        };
        #[cfg(test)]
        if self.corrupt == Some(node.op.name()) {
            for (_, c) in contributions.iter_mut() {
                *c = tensor::scale(c, S::from_f64(1.5));
            }
        }
        for (v, c) in contributions {
            accumulate(&mut grads[v.0], c)?;
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(acc) => *acc = tensor::add(acc, &g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

impl<S: Scalar> Ops<S> for Tape<S> {
    type V = Var;

    fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<S> {
        self.get(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::matmul(self.get(*a), self.get(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b)))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.get(*a), self.get(*b))?;
        Ok(self.push(v, Op::MatMulNt(*a, *b)))
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let v = tensor::transpose(self.get(*a))?;
        Ok(self.push(v, Op::Transpose(*a)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::add(self.get(*a), self.get(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::sub(self.get(*a), self.get(*b))?;
        Ok(self.push(v, Op::Sub(*a, *b)))
    }
    fn scale(&mut self, a: &Var, s: S) -> Result<Var> {
        let v = tensor::scale(self.get(*a), s);
        Ok(self.push(v, Op::Scale(*a, s)))
    }
    fn relu(&mut self, a: &Var) -> Result<Var> {
        let v = tensor::relu(self.get(*a));
        Ok(self.push(v, Op::Relu(*a)))
    }
    fn add_row(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let v = tensor::add_row(self.get(*x), self.get(*bias))?;
        Ok(self.push(v, Op::AddRow(*x, *bias)))
    }
    fn masked_softmax(&mut self, logits: &Var, mask: Option<&ChunkMask>) -> Result<Var> {
        let v = tensor::masked_softmax(self.get(*logits), mask)?;
        Ok(self.push(v, Op::Softmax(*logits)))
    }
    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: S) -> Result<Var> {
        let (y, xhat, rstd) =
            tensor::layer_norm_parts(self.get(*x), self.get(*gamma), self.get(*beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                xhat,
                rstd,
            },
        ))
    }
    fn causal_conv1d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let v = tensor::causal_conv1d(self.get(*x), self.get(*w), self.get(*b))?;
        Ok(self.push(v, Op::Conv(*x, *w, *b)))
    }
    fn concat_time(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::concat_time(self.get(*a), self.get(*b))?;
        Ok(self.push(v, Op::ConcatTime(*a, *b)))
    }
    fn tail_slice(&mut self, a: &Var, s: usize) -> Result<Var> {
        let src = self.get(*a);
        let start = src.frames() - s.min(src.frames());
        let v = tensor::tail_slice(src, s);
        Ok(self.push(v, Op::SliceTime(*a, start)))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_cols(self.get(*a), start, len)?;
        Ok(self.push(v, Op::SliceCols(*a, start)))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|p| self.get(*p)).collect();
        let v = tensor::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }
    fn mse(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let v = Tensor::scalar(tensor::mse(self.get(*pred), self.get(*target))?);
        Ok(self.push(v, Op::Mse(*pred, *target)))
    }
    fn sum(&mut self, a: &Var) -> Result<Var> {
        let v = Tensor::scalar(self.get(*a).sum());
        Ok(self.push(v, Op::Sum(*a)))
    }
}

/// Per-node gradients from one backward pass.
pub struct Adjoints<'t, S> {
    grads: Vec<Option<Tensor<S>>>,
    tape: &'t Tape<S>,
}

impl<S: Scalar> Adjoints<'_, S> {
    /// Gradient at `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, zero-filled when it does not influence the output.
    pub fn get_or_zero(&self, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.tape.get(v).shape()))
    }

    /// Gradients of every named parameter on the tape.
    pub fn params(&self) -> Gradients<S> {
        let mut map = BTreeMap::new();
        for (i, node) in self.tape.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                map.insert(name.clone(), self.get_or_zero(Var(i)));
            }
        }
        Gradients(map)
    }
}

/// Parameter name → gradient, same shape as the parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<S>(pub BTreeMap<String, Tensor<S>>);

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.0.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub type ParamSet<S> = BTreeMap<String, Tensor<S>>;

/// Records `program` over `params`, returning the output value and the tape.
pub fn forward_record<S, F>(program: F, params: &ParamSet<S>) -> Result<(Var, Tape<S>)>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
        .collect();
    let out = program(&mut tape, &vars)?;
    Ok((out, tape))
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tol: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> Vec<&FdEntry> {
        self.entries.iter().filter(|e| e.max_rel_error > self.tol).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares tape gradients against central differences of `sum(program(params))`.
pub fn finite_diff_check<F>(program: F, params: &ParamSet<f64>, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let (out, tape) = forward_record(&program, params)?;
    let seed = Tensor::full(tape.get(out).shape(), 1.0);
    let analytic = tape.backward(out, &seed)?.params();
    fd_compare(&program, params, &analytic, h, tol)
}

fn fd_compare<F>(
    program: &F,
    params: &ParamSet<f64>,
    analytic: &Gradients<f64>,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let (out, tape) = forward_record(program, p)?;
        Ok(tape.get(out).sum())
    };
    let mut entries = Vec::new();
    let mut work = params.clone();
    for (name, value) in params {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("no gradient for parameter {name}")))?;
        let mut entry = FdEntry {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a.data()[i], numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err.max(entry.max_rel_error);
                entry.worst_index = i;
                entry.analytic = a.data()[i];
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(FdReport { tol, entries })
}
