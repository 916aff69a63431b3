//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the backward pass. `backward` walks the record once, newest to
//! oldest, and returns a fresh set of gradient accumulators.

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
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
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PickLogSoftmax {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor,
        pairs: Vec<(usize, usize)>,
        beta: f64,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input (a parameter or a value under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix("transpose", t)?;
        let out = t.transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[.. × n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(dim_err("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    /// Elementwise product with a constant of the same length (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if c.len() != ta.len() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: ta.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = ta.data().iter().zip(&c).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    /// Exact error-function GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu_scalar(x)).collect())?;
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len().max(1) {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape.get(axis).copied().unwrap_or(1);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape.get(axis + 1..).map(|s| s.iter().product()).unwrap_or(1);
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * axis_len + j) * inner + i;
                let max = (0..axis_len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..axis_len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x: a,
                outer,
                axis_len,
                inner,
            },
            &[a],
        ))
    }

    /// Per-row normalization over the last extent followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
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

    /// Multi-head scaled dot-product self-attention over `[L × D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = require_matrix("attention", tq)?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(dim_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                let qi = &tq.data()[i * d + off..i * d + off + dh];
                let prow = &mut p[i * l..(i + 1) * l];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    let kj = &tk.data()[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in prow.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in prow.iter_mut() {
                    *s /= sum;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..l {
                    let w = prow[j];
                    let vj = &tv.data()[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![l, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = require_matrix("gather", t)?;
        if ids.is_empty() {
            return Err(Error::Contract("gather needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!("index {id} out of range for table of {rows} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != d {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if len == 0 || start + len > t.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                t.rows()
            )));
        }
        let out = Tensor::new(vec![len, d], t.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// `Σ_(r,t) [ −logits[r,t] + logsumexp_{j allowed in row r} logits[r,j] ]`.
    ///
    /// `allowed` is a row-major mask over `logits`; `None` allows every column.
    /// The picked entry need not be inside the allowed set.
    pub fn pick_log_softmax(
        &mut self,
        logits: Var,
        picks: &[(usize, usize)],
        allowed: Option<Vec<bool>>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = require_matrix("pick_log_softmax", t)?;
        if let Some(mask) = &allowed {
            if mask.len() != rows * cols {
                return Err(Error::Dimension {
                    op: "pick_log_softmax",
                    lhs: vec![rows, cols],
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        let mut done = vec![false; rows];
        let mut lse = vec![0.0; rows];
        let mut total = 0.0;
        for &(r, c) in picks {
            if r >= rows || c >= cols {
                return Err(Error::Contract(format!("pick ({r},{c}) outside {rows}x{cols}")));
            }
            if !done[r] {
                let row = t.row(r);
                let ok = |j: usize| allowed.as_ref().map_or(true, |m| m[r * cols + j]);
                let max = (0..cols).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Batch(format!("row {r} has no allowed candidates")));
                }
                let mut sum = 0.0;
                for j in (0..cols).filter(|&j| ok(j)) {
                    let e = (row[j] - max).exp();
                    probs[r * cols + j] = e;
                    sum += e;
                }
                for j in 0..cols {
                    probs[r * cols + j] /= sum;
                }
                lse[r] = max + sum.ln();
                done[r] = true;
            }
            total += lse[r] - t.row(r)[c];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PickLogSoftmax {
                logits,
                picks: picks.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of smooth-L1 penalties between `pred` rows and constant `target` rows.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, pairs: &[(usize, usize)], beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("smooth-L1 beta must be positive, got {beta}")));
        }
        let t = self.value(pred);
        if t.cols() != target.cols() {
            return Err(dim_err("smooth_l1", t, target));
        }
        let mut total = 0.0;
        for &(pr, tr) in pairs {
            if pr >= t.rows() || tr >= target.rows() {
                return Err(Error::Contract(format!("smooth_l1 row pair ({pr},{tr}) out of range")));
            }
            for (p, y) in t.row(pr).iter().zip(target.row(tr)) {
                total += smooth_l1_scalar(p - y, beta);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                pairs: pairs.to_vec(),
                beta,
            },
            &[pred],
        ))
    }

    /// Summed binary cross-entropy on logits against constant {0,1} targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                self.accumulate(grads, *a, |da| matmul_bt_into(gd, tb.data(), da, m, n, k));
                self.accumulate(grads, *b, |db| matmul_at_into(ta.data(), gd, db, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += gd[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, gd));
                self.accumulate(grads, *b, |db| add_into(db, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, gd));
                self.accumulate(grads, *b, |db| {
                    for (x, y) in db.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    for ((x, y), w) in da.iter_mut().zip(gd).zip(tb.data()) {
                        *x += y * w;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((x, y), w) in db.iter_mut().zip(gd).zip(ta.data()) {
                        *x += y * w;
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, gd));
                let n = node.value.cols();
                self.accumulate(grads, *b, |db| {
                    for row in gd.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(gd) {
                        *x += c * y;
                    }
                });
            }
            Op::MulConst(a, m) => {
                self.accumulate(grads, *a, |da| {
                    for ((x, y), w) in da.iter_mut().zip(gd).zip(m) {
                        *x += y * w;
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |da| {
                    for ((x, y), &v) in da.iter_mut().zip(gd).zip(ta.data()) {
                        *x += y * gelu_grad(v);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * axis_len + j) * inner + i;
                            let dot: f64 = (0..axis_len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..axis_len {
                                dx[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let tg = self.value(*gain).data();
                self.accumulate(grads, *x, |dx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            dx[r * d + j] += is * (dh - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gr in gd.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |dt| {
                    for (pos, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &gd[pos * d..(pos + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |dp| add_into(dp, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                let s = start * d;
                self.accumulate(grads, *x, |dx| add_into(&mut dx[s..s + gd.len()], gd));
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.cols();
                let y = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::PickLogSoftmax {
                logits,
                picks,
                probs,
            } => {
                let g0 = gd[0];
                let cols = self.value(*logits).cols();
                self.accumulate(grads, *logits, |dl| {
                    for &(r, c) in picks {
                        for j in 0..cols {
                            dl[r * cols + j] += g0 * probs[r * cols + j];
                        }
                        dl[r * cols + c] -= g0;
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                pairs,
                beta,
            } => {
                let g0 = gd[0];
                let tp = self.value(*pred);
                let f = tp.cols();
                self.accumulate(grads, *pred, |dp| {
                    for &(pr, tr) in pairs {
                        for j in 0..f {
                            let diff = tp.row(pr)[j] - target.row(tr)[j];
                            let d = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                            dp[pr * f + j] += g0 * d;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let g0 = gd[0];
                let tl = self.value(*logits);
                self.accumulate(grads, *logits, |dl| {
                    for ((d, &x), &y) in dl.iter_mut().zip(tl.data()).zip(targets) {
                        *d += g0 * (sigmoid(x) - y);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |dx| {
                    for v in dx.iter_mut() {
                        *v += g0;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (tq.shape()[0], tq.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut ds = vec![0.0; l * l];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                let go = &gd[i * d + off..i * d + off + dh];
                let prow = &p[i * l..(i + 1) * l];
                let mut dot = 0.0;
                for j in 0..l {
                    let vj = &tv.data()[j * d + off..j * d + off + dh];
                    let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * l + j] = dp;
                    dot += dp * prow[j];
                    let w = prow[j];
                    for (x, g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                        *x += w * g;
                    }
                }
                for j in 0..l {
                    ds[i * l + j] = prow[j] * (ds[i * l + j] - dot) * scale;
                }
            }
            for i in 0..l {
                for j in 0..l {
                    let s = ds[i * l + j];
                    if s == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += s * tk.data()[j * d + off + c];
                        dk[j * d + off + c] += s * tq.data()[i * d + off + c];
                    }
                }
            }
        }
        self.accumulate(grads, q, |x| add_into(x, &dq));
        self.accumulate(grads, k, |x| add_into(x, &dk));
        self.accumulate(grads, v, |x| add_into(x, &dv));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1_scalar(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}
