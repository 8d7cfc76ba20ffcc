use std::str::FromStr;

use rand::Rng as _;

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities available to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Relu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected gelu, relu or tanh)"
            ))),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Activation(Var, Activation),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Select { x: Var, idx: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Dot(Var, Var),
    LogSumExp(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op,
            detail: "NaN in input".into(),
        });
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf. Gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
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

    /// Accumulated gradient of `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply [{m}×{k}] by [{k2}×{n}]"),
            ));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), &[a])
    }

    /// Adds a bias of length `n` to every row of a tensor whose last axis is
    /// `n`. This is the only broadcasting the engine performs.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Columns whose `keep` flag is false are
    /// treated as `-inf` logits in every row.
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let value = self.value(x);
        let n = value.cols();
        check_finite("softmax", value.data())?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of length {} for last axis {n}", k.len()),
                ));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Numeric {
                    op: "softmax",
                    detail: "every column is masked".into(),
                });
            }
        }
        let mut out = Vec::with_capacity(value.len());
        for row in value.data().chunks(n) {
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| kept(j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = if kept(j) { (v - max).exp() } else { 0.0 };
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), &[x]))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).data().iter().map(|&v| kind.forward(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Activation(x, kind), &[x])
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() > 2 || t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("cannot stack {:?} under {cols} columns", t.shape()),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.rank2("concat_cols", p)?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::shape("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of 0..{r}", start + len),
            ));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of 0..{c}", start + len),
            ));
        }
        let src = self.value(x).data();
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, c) = self.rank2("row", x)?;
        if i >= r {
            return Err(Error::shape("row", format!("row {i} out of {r}")));
        }
        self.select(x, (i * c..(i + 1) * c).collect())
    }

    /// Gathers rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {v}")));
        }
        let src = self.value(table).data();
        let out = ids
            .iter()
            .flat_map(|&id| src[id * d..(id + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks flat elements of `x` into a vector.
    pub fn select(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("select", format!("indices out of range 0..{n}")));
        }
        let src = self.value(x).data();
        let out = idx.iter().map(|&i| src[i]).collect();
        let len = idx.len();
        Ok(self.push(vec![len], out, Op::Select { x, idx }, &[x]))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(
                "dot",
                format!("lengths {} and {} differ", self.value(a).len(), self.value(b).len()),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Vec::new(), vec![s], Op::Dot(a, b), &[a, b]))
    }

    /// `log Σ exp(x)` over every element, computed with max subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data();
        check_finite("logsumexp", data)?;
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(self.push(Vec::new(), vec![s], Op::LogSumExp(x), &[x]))
    }

    /// Row-wise maximum of a matrix; ties resolve to the first column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("max_rows", x)?;
        let src = self.value(x).data();
        let mut argmax = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        Ok(self.push(vec![r], out, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / n);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric {
                    op: "l2_normalize_rows",
                    detail: format!("row norm {norm}"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Back-propagates from a scalar `loss`, adding into the stored gradient
    /// of every node that requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("{loss:?} is not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if wants(*a) {
                    accumulate(grads, *a, mm_nt(g, self.value(*b).data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, mm_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y);
                    accumulate(grads, *a, d.collect());
                }
                if wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y);
                    accumulate(grads, *b, d.collect());
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| inv_std[r] * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Activation(x, kind) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| gv * kind.derivative(*xv));
                accumulate(grads, *x, d.collect());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(*p) {
                        accumulate(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if wants(*p) {
                        let d = (0..rows)
                            .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                            .collect();
                        accumulate(grads, *p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (i, gr) in g.chunks(len).enumerate() {
                    d[i * c + start..i * c + start + len].copy_from_slice(gr);
                }
                accumulate(grads, *x, d);
            }
            Op::GatherRows { table, ids } => {
                let d_model = node.value.cols();
                let mut d = vec![0.0; self.value(*table).len()];
                for (gr, &id) in g.chunks(d_model).zip(ids) {
                    d[id * d_model..(id + 1) * d_model]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, d);
            }
            Op::Select { x, idx } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &i) in g.iter().zip(idx) {
                    d[i] += gv;
                }
                accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Dot(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, self.value(*b).data().iter().map(|v| v * g[0]).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, self.value(*a).data().iter().map(|v| v * g[0]).collect());
                }
            }
            Op::LogSumExp(x) => {
                let out = node.value.item();
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| (v - out).exp() * g[0])
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::MaxRows { x, argmax } => {
                let c = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (i, (&j, gv)) in argmax.iter().zip(g).enumerate() {
                    d[i * c + j] = *gv;
                }
                accumulate(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), norm) in y.chunks(n).zip(g.chunks(n)).zip(norms) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * inner) / norm));
                }
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        }
    }
}
