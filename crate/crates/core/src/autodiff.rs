//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes are created in topological order, so [`Tape::backward`] walks the
//! node list once from the loss down to the first node. A tape supports a
//! single backward pass.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    LnClamped { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(ParamId, Var)>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    inference: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            inference: false,
        }
    }

    /// A tape that records nothing differentiable; `backward` is rejected.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && !self.inference,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a borrowed tensor as a leaf. Gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Records an owned, non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, false)
    }

    /// Records a parameter of `store` as a leaf. Repeated calls for the same
    /// id return the same variable.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.tensor(id));
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            mm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        } else {
            mm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row (broadcast over the last axis).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.value(bias).len() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// Elementwise product with a non-differentiable constant of equal length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[c.len()]));
        }
        let out: Vec<f64> = self.value(x).iter().zip(&c).map(|(x, y)| x * y).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::MulConst(x, c), rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `keep[j] == false` removes column `j`
    /// from every row. Removed entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if let Some(k) = keep {
            if k.len() != d {
                return Err(Error::shape("masked_softmax", self.shape(x), &[k.len()]));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Contract("softmax row fully masked".into()));
            }
        }
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("softmax input is not finite".into()));
        }
        let live = |j: usize| keep.map_or(true, |k| k[j]);
        let mut out = vec![0.0; xs.len()];
        for (row, o) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| live(j))
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            let mut sum = 0.0;
            for j in 0..d {
                if live(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Softmax(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Tanh(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), op, rg))
    }

    /// Row lookup: `ids.len() × d` from a `vocab × d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather", s, &[ids.len()]));
        }
        let (rows, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Gather { index: bad, size: rows });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), d], Cow::Owned(out), op, rg))
    }

    /// Inverted dropout. Identity (the same variable) when not training or
    /// when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Dropout { x, mask }, rg))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, len], Cow::Owned(out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of a 2-D value.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::shape("rows", s, &[start, len]));
        }
        let d = s[1];
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, d], Cow::Owned(out), Op::Rows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    /// `ln(clamp(x, lo, hi))`. The gradient is zero where clamping is active.
    pub fn ln_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.clamp(lo, hi).ln()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::LnClamped { x, lo, hi }, rg)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if self.inference {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves out the gradient of every recorded parameter. Parameters that
    /// received no gradient get zeros.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<f64>)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(id, v)| {
                let g = self
                    .grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (id, g)
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let len = |v: Var| nodes[v.0].value.len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len(v)]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = nodes[a.0].shape[1];
                if *trans_b {
                    // B is n×k: dA = dC · B, dB = dCᵀ · A
                    acc(*a, &mut |ga| mm_nn(m, n, k, g, val(*b), ga));
                    acc(*b, &mut |gb| mm_tn(m, n, k, g, val(*a), gb));
                } else {
                    // B is k×n: dA = dC · Bᵀ, dB = Aᵀ · dC
                    acc(*a, &mut |ga| mm_nt(m, n, k, g, val(*b), ga));
                    acc(*b, &mut |gb| mm_tn(m, k, n, val(*a), g, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(vb).for_each(|((o, g), y)| *o += g * y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(va).for_each(|((o, g), x)| *o += g * x));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(c).for_each(|((o, g), c)| *o += g * c));
            }
            Op::Affine(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, g)| *o += s * g));
            }
            Op::Softmax(x) => {
                // Masked entries have y == 0, so the same rule zeroes them.
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(y.iter()).for_each(|((o, g), y)| *o += g * y * (1.0 - y))
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(y.iter()).for_each(|((o, g), y)| *o += g * (1.0 - y * y))
                });
            }
            Op::Gelu(x) => {
                let xs = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, g), &v) in gx.iter_mut().zip(g).zip(xs) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += g * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gm = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, hr), gxr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(mask).for_each(|((o, g), m)| *o += g * m));
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = (node.shape[0], node.shape[1]);
                let cols = nodes[x.0].shape[1];
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        add_into(&mut gx[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Rows { x, start } => {
                let d = node.shape[1];
                acc(*x, &mut |gx| add_into(&mut gx[start * d..start * d + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::LnClamped { x, lo, hi } => {
                let xs = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, g), &v) in gx.iter_mut().zip(g).zip(xs) {
                        if v > *lo && v < *hi {
                            *o += g / v;
                        }
                    }
                });
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if aip != 0.0 {
                axpy(crow, aip, brow);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, row-major.
fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cij, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            *cij += dot(arow, brow);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`, row-major.
fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&aip, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            if aip != 0.0 {
                axpy(crow, aip, brow);
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}
