//! Append-only computation tape with a single reverse sweep.
//!
//! Every operation records its inputs (always earlier nodes) and its forward
//! value. `backward` walks the nodes once, from the loss down to the leaves.

use std::collections::BTreeMap;

use crate::error::{ArosError, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulByScalar(Var, Var),
    DivByScalar(Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    RowSoftmax(Var),
    RowMax(Var),
    CrossEntropy(Var, Vec<usize>),
    RowNorm(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Diag(Var),
    BatchDiag(Var),
    BatchRowScale(Var, Var),
    BatchLeftMatmul(Var, Var),
    Conv3x3(Var, Var, Var),
    AvgPool2 {
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulByScalar(..) => "mul_by_scalar",
            Op::DivByScalar(..) => "div_by_scalar",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowMax(..) => "row_max",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::RowNorm(..) => "row_norm",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Diag(..) => "diag",
            Op::BatchDiag(..) => "batch_diag",
            Op::BatchRowScale(..) => "batch_row_scale",
            Op::BatchLeftMatmul(..) => "batch_left_matmul",
            Op::Conv3x3(..) => "conv3x3",
            Op::AvgPool2 { .. } => "avg_pool2",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulByScalar(a, b)
            | Op::DivByScalar(a, b)
            | Op::BatchRowScale(a, b)
            | Op::BatchLeftMatmul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::RowSoftmax(a)
            | Op::RowMax(a)
            | Op::CrossEntropy(a, _)
            | Op::RowNorm(a)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Diag(a)
            | Op::BatchDiag(a)
            | Op::AvgPool2 { x: a, .. } => vec![*a],
            Op::ConcatCols(v) => v.clone(),
            Op::Conv3x3(a, b, c) => vec![*a, *b, *c],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// False for constants and for nodes computed only from constants.
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> ArosError {
    ArosError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (input or constant). Gradients w.r.t. it may still be queried.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records a value that never receives a gradient, e.g. frozen weights.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds a length-`n` vector to every row of an `(…, n)` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if bv.ndim() != 1 || xv.shape().last() != Some(&n) {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(x, bias), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(ArosError::Shape {
                op,
                lhs: sv.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(sv.item())
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn mul_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("mul_by_scalar", s)?;
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(Op::MulByScalar(a, s), out))
    }

    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("div_by_scalar", s)?;
        let out = self.value(a).map(|x| x / c);
        Ok(self.push(Op::DivByScalar(a, s), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Sums over the last axis: `(…, n) → (…)`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        let n = *shape.last().ok_or_else(|| shape_err("sum_last", v, v))?;
        let data: Vec<f64> = v.data().chunks(n).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(Op::SumLast(a), out))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, c) = v.dims2()?;
        let mut out = v.clone();
        for (src, dst) in v.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            softmax_row(src, dst);
        }
        Ok(self.push(Op::RowSoftmax(a), out))
    }

    /// Row-wise maximum `(B, C) → (B)`; the gradient flows to the first argmax.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, c) = v.dims2()?;
        let data = v.data().chunks(c).map(|r| r[argmax(r)]).collect();
        let out = Tensor::vector(data);
        Ok(self.push(Op::RowMax(a), out))
    }

    /// Per-row softmax cross-entropy `(B, C) → (B)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (b, c) = v.dims2()?;
        if labels.len() != b || labels.iter().any(|&y| y >= c) {
            return Err(ArosError::contract(format!(
                "cross_entropy: {} labels for {b}×{c} logits",
                labels.len()
            )));
        }
        let data = v
            .data()
            .chunks(c)
            .zip(labels)
            .map(|(row, &y)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .collect();
        let out = Tensor::vector(data);
        Ok(self.push(Op::CrossEntropy(logits, labels.to_vec()), out))
    }

    /// Euclidean norm of each row `(B, n) → (B)`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, c) = v.dims2()?;
        let data = v
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::vector(data);
        Ok(self.push(Op::RowNorm(a), out))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        if start >= end || end > c {
            return Err(ArosError::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in v.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| ArosError::contract("concat of nothing"))?);
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2()?;
            if pr != r {
                return Err(shape_err("concat_cols", first, pv));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Vector `(n)` to diagonal matrix `(n, n)`.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 1 {
            return Err(shape_err("diag", v, v));
        }
        let n = v.len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &x) in v.data().iter().enumerate() {
            out.data_mut()[i * n + i] = x;
        }
        Ok(self.push(Op::Diag(a), out))
    }

    /// Diagonals of a batch of square matrices `(B, d, d) → (B, d)`.
    pub fn batch_diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (b, d) = match v.shape() {
            [b, d1, d2] if d1 == d2 => (*b, *d1),
            _ => return Err(shape_err("batch_diag", v, v)),
        };
        let mut data = Vec::with_capacity(b * d);
        for m in v.data().chunks(d * d) {
            data.extend((0..d).map(|i| m[i * d + i]));
        }
        let out = Tensor::matrix(b, d, data)?;
        Ok(self.push(Op::BatchDiag(a), out))
    }

    /// `out[b] = diag(s[b]) · A[b]`, with `A` either `(m, n)` (shared) or `(B, m, n)`.
    pub fn batch_row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        let (b, m) = sv.dims2()?;
        let n = match av.shape() {
            [am, an] if *am == m => *an,
            [ab, am, an] if *ab == b && *am == m => *an,
            _ => return Err(shape_err("batch_row_scale", av, sv)),
        };
        let shared = av.ndim() == 2;
        let mut out = Tensor::zeros(&[b, m, n]);
        let od = out.data_mut();
        let ad = av.data();
        for bi in 0..b {
            let abase = if shared { 0 } else { bi * m * n };
            for i in 0..m {
                let si = sv.data()[bi * m + i];
                for j in 0..n {
                    od[bi * m * n + i * n + j] = si * ad[abase + i * n + j];
                }
            }
        }
        Ok(self.push(Op::BatchRowScale(a, s), out))
    }

    /// `out[b] = W · A[b]` with `W: (p, m)` and `A: (B, m, n)`.
    pub fn batch_left_matmul(&mut self, w: Var, a: Var) -> Result<Var> {
        let (wv, av) = (self.value(w), self.value(a));
        let (p, m) = wv.dims2()?;
        let (b, n) = match av.shape() {
            [ab, am, an] if *am == m => (*ab, *an),
            _ => return Err(shape_err("batch_left_matmul", wv, av)),
        };
        let mut out = Tensor::zeros(&[b, p, n]);
        for bi in 0..b {
            gemm_acc(
                wv.data(),
                &av.data()[bi * m * n..(bi + 1) * m * n],
                &mut out.data_mut()[bi * p * n..(bi + 1) * p * n],
                p,
                m,
                n,
            );
        }
        Ok(self.push(Op::BatchLeftMatmul(w, a), out))
    }

    /// Valid 3×3 convolution of single-channel images `(B, H, W)` with kernels
    /// `(F, 3, 3)` and bias `(F)`, flattened to `(B, F·(H−2)·(W−2))`.
    pub fn conv3x3(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernels), self.value(bias));
        let (b, h, w) = match xv.shape() {
            [b, h, w] if *h >= 3 && *w >= 3 => (*b, *h, *w),
            _ => return Err(shape_err("conv3x3", xv, kv)),
        };
        let f = match kv.shape() {
            [f, 3, 3] if bv.shape() == [*f] => *f,
            _ => return Err(shape_err("conv3x3", kv, bv)),
        };
        let (oh, ow) = (h - 2, w - 2);
        let mut out = Tensor::zeros(&[b, f * oh * ow]);
        let od = out.data_mut();
        for bi in 0..b {
            let img = &xv.data()[bi * h * w..(bi + 1) * h * w];
            for fi in 0..f {
                let k = &kv.data()[fi * 9..fi * 9 + 9];
                let base = bi * f * oh * ow + fi * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = bv.data()[fi];
                        for di in 0..3 {
                            for dj in 0..3 {
                                s += k[di * 3 + dj] * img[(i + di) * w + j + dj];
                            }
                        }
                        od[base + i * ow + j] = s;
                    }
                }
            }
        }
        Ok(self.push(Op::Conv3x3(x, kernels, bias), out))
    }

    /// 2×2 average pooling over `channels` feature maps of size `h×w`
    /// stored flat per row; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, len) = xv.dims2()?;
        if len != channels * h * w || h < 2 || w < 2 {
            return Err(shape_err("avg_pool2", xv, xv));
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, channels * ph * pw]);
        let od = out.data_mut();
        for bi in 0..b {
            for c in 0..channels {
                let src = &xv.data()[bi * len + c * h * w..bi * len + (c + 1) * h * w];
                let dst = bi * channels * ph * pw + c * ph * pw;
                for i in 0..ph {
                    for j in 0..pw {
                        od[dst + i * pw + j] = 0.25
                            * (src[2 * i * w + 2 * j]
                                + src[2 * i * w + 2 * j + 1]
                                + src[(2 * i + 1) * w + 2 * j]
                                + src[(2 * i + 1) * w + 2 * j + 1]);
                    }
                }
            }
        }
        Ok(self.push(Op::AvgPool2 { x, channels, h, w }, out))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(ArosError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(ArosError::NonFinite {
                    node: id,
                    op: node.op.name(),
                });
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;

        // Accumulates `f(k)` into the gradient buffer of `v`, entry by entry.
        fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl Fn(usize) -> f64) {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
            for (k, s) in slot.data_mut().iter_mut().enumerate() {
                *s += f(k);
            }
        }
        fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
        }

        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.nodes[a.0].needs_grad {
                    gemm_nt_acc(gd, bv.data(), slot(grads, *a, av.shape()), m, n, k);
                }
                if self.nodes[b.0].needs_grad {
                    gemm_tn_acc(av.data(), gd, slot(grads, *b, bv.shape()), m, k, n);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                acc(grads, *a, val(*a).shape(), |k| gt.data()[k]);
            }
            Op::Add(a, b) => {
                acc(grads, *a, y.shape(), |k| gd[k]);
                acc(grads, *b, y.shape(), |k| gd[k]);
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, y.shape(), |k| gd[k]);
                if self.nodes[b.0].needs_grad {
                    let n = val(*b).len();
                    let s = slot(grads, *b, &[n]);
                    for chunk in gd.chunks(n) {
                        for (o, v) in s.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                acc(grads, *a, y.shape(), |k| gd[k]);
                acc(grads, *b, y.shape(), |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(grads, *a, y.shape(), |k| gd[k] * bd[k]);
                acc(grads, *b, y.shape(), |k| gd[k] * ad[k]);
            }
            Op::Neg(a) => acc(grads, *a, y.shape(), |k| -gd[k]),
            Op::Scale(a, c) => acc(grads, *a, y.shape(), |k| c * gd[k]),
            Op::AddScalar(a) => acc(grads, *a, y.shape(), |k| gd[k]),
            Op::MulByScalar(a, s) => {
                let c = val(*s).item();
                let ad = val(*a).data();
                acc(grads, *a, y.shape(), |k| gd[k] * c);
                let ds: f64 = gd.iter().zip(ad).map(|(g, x)| g * x).sum();
                acc(grads, *s, val(*s).shape(), |_| ds);
            }
            Op::DivByScalar(a, s) => {
                let c = val(*s).item();
                let ad = val(*a).data();
                acc(grads, *a, y.shape(), |k| gd[k] / c);
                let ds: f64 = -gd.iter().zip(ad).map(|(g, x)| g * x).sum::<f64>() / (c * c);
                acc(grads, *s, val(*s).shape(), |_| ds);
            }
            Op::Tanh(a) => {
                let yd = y.data();
                acc(grads, *a, y.shape(), |k| gd[k] * (1.0 - yd[k] * yd[k]));
            }
            Op::Exp(a) => {
                let yd = y.data();
                acc(grads, *a, y.shape(), |k| gd[k] * yd[k]);
            }
            Op::Log(a) => {
                let xd = val(*a).data();
                acc(grads, *a, y.shape(), |k| gd[k] / xd[k]);
            }
            Op::Abs(a) => {
                let xd = val(*a).data();
                // Subgradient at 0 is 0.
                acc(grads, *a, y.shape(), |k| {
                    let x = xd[k];
                    if x > 0.0 {
                        gd[k]
                    } else if x < 0.0 {
                        -gd[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sqrt(a) => {
                let yd = y.data();
                acc(grads, *a, y.shape(), |k| {
                    if yd[k] > 0.0 {
                        gd[k] / (2.0 * yd[k])
                    } else {
                        0.0
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let xd = val(*a).data();
                acc(grads, *a, y.shape(), |k| {
                    if xd[k] >= *lo && xd[k] <= *hi {
                        gd[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(grads, *a, val(*a).shape(), |_| g0);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                let g0 = gd[0] / n;
                acc(grads, *a, val(*a).shape(), |_| g0);
            }
            Op::SumLast(a) => {
                let av = val(*a);
                let n = *av.shape().last().unwrap_or(&1);
                acc(grads, *a, av.shape(), |k| gd[k / n]);
            }
            Op::RowSoftmax(a) => {
                let (_, c) = y.dims2()?;
                let yd = y.data();
                let s = slot(grads, *a, y.shape());
                for r in 0..yd.len() / c {
                    let (yr, gr) = (&yd[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        s[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::RowMax(a) => {
                let av = val(*a);
                let (_, c) = av.dims2()?;
                let idx: Vec<usize> = av.data().chunks(c).map(argmax).collect();
                let s = slot(grads, *a, av.shape());
                for (r, &j) in idx.iter().enumerate() {
                    s[r * c + j] += gd[r];
                }
            }
            Op::CrossEntropy(a, labels) => {
                let av = val(*a);
                let (_, c) = av.dims2()?;
                let mut p = vec![0.0; c];
                let s = slot(grads, *a, av.shape());
                for (r, (row, &lab)) in av.data().chunks(c).zip(labels).enumerate() {
                    softmax_row(row, &mut p);
                    for j in 0..c {
                        let onehot = if j == lab { 1.0 } else { 0.0 };
                        s[r * c + j] += gd[r] * (p[j] - onehot);
                    }
                }
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let (_, c) = av.dims2()?;
                let yd = y.data();
                let xd = av.data();
                acc(grads, *a, av.shape(), |k| {
                    let r = k / c;
                    if yd[r] > 0.0 {
                        gd[r] * xd[k] / yd[r]
                    } else {
                        0.0
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let (_, c) = av.dims2()?;
                let (_, w) = y.dims2()?;
                let s = slot(grads, *a, av.shape());
                for (r, gr) in gd.chunks(w).enumerate() {
                    for (j, v) in gr.iter().enumerate() {
                        s[r * c + start + j] += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = y.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let (_, w) = pv.dims2()?;
                    let s = slot(grads, p, pv.shape());
                    for i in 0..r {
                        for j in 0..w {
                            s[i * w + j] += gd[i * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(a) => acc(grads, *a, val(*a).shape(), |k| gd[k]),
            Op::Diag(a) => {
                let n = val(*a).len();
                acc(grads, *a, &[n], |i| gd[i * n + i]);
            }
            Op::BatchDiag(a) => {
                let av = val(*a);
                let d = av.shape()[1];
                let s = slot(grads, *a, av.shape());
                for (bi, gr) in gd.chunks(d).enumerate() {
                    for (i, v) in gr.iter().enumerate() {
                        s[bi * d * d + i * d + i] += v;
                    }
                }
            }
            Op::BatchRowScale(a, sv) => {
                let (av, svv) = (val(*a), val(*sv));
                let (b, m) = svv.dims2()?;
                let n = *av.shape().last().unwrap_or(&1);
                let shared = av.ndim() == 2;
                let (ad, sd) = (av.data(), svv.data());
                {
                    let sa = slot(grads, *a, av.shape());
                    for bi in 0..b {
                        let abase = if shared { 0 } else { bi * m * n };
                        for i in 0..m {
                            let si = sd[bi * m + i];
                            for j in 0..n {
                                sa[abase + i * n + j] += gd[bi * m * n + i * n + j] * si;
                            }
                        }
                    }
                }
                let ss = slot(grads, *sv, svv.shape());
                for bi in 0..b {
                    let abase = if shared { 0 } else { bi * m * n };
                    for i in 0..m {
                        let mut t = 0.0;
                        for j in 0..n {
                            t += gd[bi * m * n + i * n + j] * ad[abase + i * n + j];
                        }
                        ss[bi * m + i] += t;
                    }
                }
            }
            Op::BatchLeftMatmul(w, a) => {
                let (wv, av) = (val(*w), val(*a));
                let (p, m) = wv.dims2()?;
                let (b, n) = (av.shape()[0], av.shape()[2]);
                if self.nodes[w.0].needs_grad {
                    let sw = slot(grads, *w, wv.shape());
                    for bi in 0..b {
                        gemm_nt_acc(
                            &gd[bi * p * n..(bi + 1) * p * n],
                            &av.data()[bi * m * n..(bi + 1) * m * n],
                            sw,
                            p,
                            n,
                            m,
                        );
                    }
                }
                let sa = slot(grads, *a, av.shape());
                for bi in 0..b {
                    gemm_tn_acc(
                        wv.data(),
                        &gd[bi * p * n..(bi + 1) * p * n],
                        &mut sa[bi * m * n..(bi + 1) * m * n],
                        p,
                        m,
                        n,
                    );
                }
            }
            Op::Conv3x3(x, kernels, bias) => {
                let (xv, kv) = (val(*x), val(*kernels));
                let (b, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let f = kv.shape()[0];
                let (oh, ow) = (h - 2, w - 2);
                let mut dk = vec![0.0; f * 9];
                let mut db = vec![0.0; f];
                let mut dx = vec![0.0; b * h * w];
                for bi in 0..b {
                    let img = &xv.data()[bi * h * w..(bi + 1) * h * w];
                    for fi in 0..f {
                        let k = &kv.data()[fi * 9..fi * 9 + 9];
                        let base = bi * f * oh * ow + fi * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = gd[base + i * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                db[fi] += go;
                                for di in 0..3 {
                                    for dj in 0..3 {
                                        let p = (i + di) * w + j + dj;
                                        dk[fi * 9 + di * 3 + dj] += go * img[p];
                                        dx[bi * h * w + p] += go * k[di * 3 + dj];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *kernels, kv.shape(), |k| dk[k]);
                acc(grads, *bias, &[f], |k| db[k]);
                acc(grads, *x, xv.shape(), |k| dx[k]);
            }
            Op::AvgPool2 { x, channels, h, w } => {
                let xv = val(*x);
                let len = channels * h * w;
                let (ph, pw) = (h / 2, w / 2);
                let s = slot(grads, *x, xv.shape());
                for bi in 0..xv.shape()[0] {
                    for c in 0..*channels {
                        let src = bi * len + c * h * w;
                        let dst = bi * channels * ph * pw + c * ph * pw;
                        for i in 0..ph {
                            for j in 0..pw {
                                let go = 0.25 * gd[dst + i * pw + j];
                                s[src + 2 * i * w + 2 * j] += go;
                                s[src + 2 * i * w + 2 * j + 1] += go;
                                s[src + (2 * i + 1) * w + 2 * j] += go;
                                s[src + (2 * i + 1) * w + 2 * j + 1] += go;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep: adjoints of every node reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// `dLoss/dParam` for every named parameter registered on the tape.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(tape, *v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
        assert_eq!(g.params(&t)["x"].item(), 6.0);
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_logits() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[&[0.0, 0.0]]));
        let ce = t.cross_entropy(z, &[0]).unwrap();
        let loss = t.sum(ce);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[-0.5, 0.5]);
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(ArosError::Contract(_))));
    }

    #[test]
    fn nan_in_reverse_sweep_reports_node() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let l = t.log(x);
        let s = t.sum(l);
        // d/dx log x at 0 is infinite; the sweep stops at the leaf.
        match t.backward(s) {
            Err(ArosError::NonFinite { node, op }) => {
                assert_eq!(node, x.id());
                assert_eq!(op, "leaf");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, -2.0, 3.0]));
        let a = t.abs(x);
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn unreached_node_gradient_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.leaf(Tensor::scalar(2.0));
        let s = t.scale(x, 2.0);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(&t, y).item(), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
        let w = t.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let wt = t.transpose(w).unwrap();
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(w).is_none());
        assert!(g.get(wt).is_none());
    }
}
