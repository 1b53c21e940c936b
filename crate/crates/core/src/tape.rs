//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! addressed by the copyable handle [`Var`]; `backward` walks the record in
//! reverse and returns a [`Grads`] table. Leaves created with [`Tape::leaf`]
//! receive gradients, [`Tape::constant`] leaves never do, and any node whose
//! inputs are all constant is skipped during the backward sweep.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SumAll(Var),
    RowSum(Var),
    LayerNorm(Var, Rc<[f64]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    Rbf(Var, Rc<[f64]>, f64),
    LogSoftmax(Var),
    LogSumExp(Var),
    MaskedAddRows(Var, Var, Rc<[bool]>),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn acc_with(slot: &mut Option<Tensor>, rows: usize, cols: usize, f: impl FnOnce(&mut Tensor)) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(rows, cols));
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad });
        Var(nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let out = f(&self.value(a));
        let g = self.grad_of(&[a]);
        self.push(out, op, g)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let g = self.grad_of(&[a, b]);
        self.push(out, op, g)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), matmul)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip_map(y, |p, q| p * q))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::AddRow(a, row), |x, r| {
            assert_eq!(r.rows, 1, "add_row expects a 1×n row");
            assert_eq!(x.cols, r.cols, "add_row width");
            let mut out = x.clone();
            for i in 0..out.rows {
                for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                    *o += b;
                }
            }
            out
        })
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, Op::MulCol(a, col), |x, c| {
            assert_eq!(c.cols, 1, "mul_col expects an m×1 column");
            assert_eq!(x.rows, c.rows, "mul_col height");
            let mut out = x.clone();
            for i in 0..out.rows {
                let s = c.data[i];
                out.row_mut(i).iter_mut().for_each(|o| *o *= s);
            }
            out
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x.map(|v| v * s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x.map(|v| v + s))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x.map(|v| v * sigmoid(v)))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.map(softplus))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.map(f64::exp))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.map(f64::ln))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.map(f64::sqrt))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.map(|v| 1.0 / v))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.map(|v| v * v))
    }

    /// Row gather: `out[e] = a[idx[e]]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Var {
        let op = Op::Gather(a, idx.clone());
        self.unary(a, op, |x| {
            let mut out = Tensor::zeros(idx.len(), x.cols);
            for (e, &i) in idx.iter().enumerate() {
                out.row_mut(e).copy_from_slice(x.row(i));
            }
            out
        })
    }

    /// Row scatter-sum into `n` rows: `out[idx[e]] += a[e]`.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let op = Op::ScatterAdd(a, idx.clone());
        self.unary(a, op, |x| {
            assert_eq!(x.rows, idx.len(), "scatter index length");
            let mut out = Tensor::zeros(n, x.cols);
            for (e, &i) in idx.iter().enumerate() {
                for (o, v) in out.row_mut(i).iter_mut().zip(x.row(e)) {
                    *o += v;
                }
            }
            out
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.rows, rows, "concat_cols height");
                for r in 0..rows {
                    out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                }
                off += v.cols;
            }
            out
        };
        let g = self.grad_of(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::SliceCols(a, start), |x| {
            assert!(start + len <= x.cols, "slice_cols range");
            let mut out = Tensor::zeros(x.rows, len);
            for r in 0..x.rows {
                out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
            }
            out
        })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.cols, cols, "concat_rows width");
                data.extend_from_slice(&v.data);
                rows += v.rows;
            }
            Tensor::from_vec(rows, cols, data)
        };
        let g = self.grad_of(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::SliceRows(a, start), |x| x.slice_rows(start, len))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a), |x| Tensor::scalar(x.sum()))
    }

    pub fn row_sum(&self, a: Var) -> Var {
        self.unary(a, Op::RowSum(a), |x| {
            Tensor::from_vec(x.rows, 1, (0..x.rows).map(|r| x.row(r).iter().sum()).collect())
        })
    }

    /// Per-row standardisation `(a - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (out, inv) = {
            let x = self.value(a);
            let mut out = Tensor::zeros(x.rows, x.cols);
            let mut inv = Vec::with_capacity(x.rows);
            let n = x.cols as f64;
            for r in 0..x.rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let s = 1.0 / (var + eps).sqrt();
                inv.push(s);
                for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                    *o = (v - mean) * s;
                }
            }
            (out, inv)
        };
        let g = self.grad_of(&[a]);
        self.push(out, Op::LayerNorm(a, inv.into()), g)
    }

    /// Column-wise softmax within segments: rows sharing `seg[e]` are normalised together.
    pub fn segment_softmax(&self, a: Var, seg: Rc<[usize]>, nseg: usize) -> Var {
        let op = Op::SegmentSoftmax(a, seg.clone());
        self.unary(a, op, |x| {
            assert_eq!(x.rows, seg.len(), "segment index length");
            let c = x.cols;
            let mut mx = vec![f64::NEG_INFINITY; nseg * c];
            for (e, &s) in seg.iter().enumerate() {
                for (m, v) in mx[s * c..(s + 1) * c].iter_mut().zip(x.row(e)) {
                    *m = m.max(*v);
                }
            }
            let mut out = Tensor::zeros(x.rows, c);
            let mut tot = vec![0.0; nseg * c];
            for (e, &s) in seg.iter().enumerate() {
                for k in 0..c {
                    let v = (x.at(e, k) - mx[s * c + k]).exp();
                    *out.at_mut(e, k) = v;
                    tot[s * c + k] += v;
                }
            }
            for (e, &s) in seg.iter().enumerate() {
                for k in 0..c {
                    *out.at_mut(e, k) /= tot[s * c + k];
                }
            }
            out
        })
    }

    /// Gaussian radial basis expansion of an `E×1` distance column.
    pub fn rbf(&self, d: Var, centers: Rc<[f64]>, gamma: f64) -> Var {
        let op = Op::Rbf(d, centers.clone(), gamma);
        self.unary(d, op, |x| {
            assert_eq!(x.cols, 1, "rbf expects a column");
            let mut out = Tensor::zeros(x.rows, centers.len());
            for e in 0..x.rows {
                let de = x.data[e];
                for (o, c) in out.row_mut(e).iter_mut().zip(centers.iter()) {
                    *o = (-gamma * (de - c) * (de - c)).exp();
                }
            }
            out
        })
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmax(a), |x| {
            let mut out = x.clone();
            for r in 0..x.rows {
                let l = logsumexp(x.row(r));
                out.row_mut(r).iter_mut().for_each(|v| *v -= l);
            }
            out
        })
    }

    /// Row-wise log-sum-exp, `m×n → m×1`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        self.unary(a, Op::LogSumExp(a), |x| {
            Tensor::from_vec(x.rows, 1, (0..x.rows).map(|r| logsumexp(x.row(r))).collect())
        })
    }

    /// `x + delta` on rows where `mask` is set; other rows are copied bit-for-bit.
    pub fn masked_add_rows(&self, x: Var, delta: Var, mask: Rc<[bool]>) -> Var {
        let op = Op::MaskedAddRows(x, delta, mask.clone());
        self.binary(x, delta, op, |a, d| {
            assert_eq!(a.shape(), d.shape(), "masked_add_rows shape");
            assert_eq!(a.rows, mask.len(), "mask length");
            let mut out = a.clone();
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    for (o, v) in out.row_mut(r).iter_mut().zip(d.row(r)) {
                        *o += v;
                    }
                }
            }
            out
        })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], matmul_nt(&g, val(*b)));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], matmul_tn(val(*a), &g));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.zip_map(val(*b), |p, q| p * q));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.zip_map(val(*a), |p, q| p * q));
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        let mut s = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in s.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[row.0], s);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (val(*a), val(*col));
                    if wants(*col) {
                        let s = (0..g.rows)
                            .map(|r| g.row(r).iter().zip(av.row(r)).map(|(p, q)| p * q).sum())
                            .collect();
                        accumulate(&mut grads[col.0], Tensor::from_vec(g.rows, 1, s));
                    }
                    if wants(*a) {
                        let mut ga = g;
                        for r in 0..ga.rows {
                            let s = cv.data[r];
                            ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.map(|v| v * s)),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Silu(a) => accumulate(
                    &mut grads[a.0],
                    g.zip_map(val(*a), |p, x| {
                        let s = sigmoid(x);
                        p * s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Softplus(a) => accumulate(&mut grads[a.0], g.zip_map(val(*a), |p, x| p * sigmoid(x))),
                Op::Exp(a) => accumulate(&mut grads[a.0], g.zip_map(&node.value, |p, y| p * y)),
                Op::Ln(a) => accumulate(&mut grads[a.0], g.zip_map(val(*a), |p, x| p / x)),
                Op::Sqrt(a) => accumulate(&mut grads[a.0], g.zip_map(&node.value, |p, y| 0.5 * p / y)),
                Op::Recip(a) => accumulate(&mut grads[a.0], g.zip_map(&node.value, |p, y| -p * y * y)),
                Op::Square(a) => accumulate(&mut grads[a.0], g.zip_map(val(*a), |p, x| 2.0 * p * x)),
                Op::Gather(a, idx) => {
                    let src = val(*a);
                    acc_with(&mut grads[a.0], src.rows, src.cols, |ga| {
                        for (e, &r) in idx.iter().enumerate() {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(e)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::ScatterAdd(a, idx) => {
                    let mut ga = Tensor::zeros(idx.len(), g.cols);
                    for (e, &r) in idx.iter().enumerate() {
                        ga.row_mut(e).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols;
                        if wants(*p) {
                            let mut gp = Tensor::zeros(g.rows, w);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            accumulate(&mut grads[p.0], gp);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let start = *start;
                    acc_with(&mut grads[a.0], src.rows, src.cols, |ga| {
                        for r in 0..g.rows {
                            for (o, v) in ga.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).rows;
                        if wants(*p) {
                            accumulate(&mut grads[p.0], g.slice_rows(off, h));
                        }
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = val(*a);
                    let start = *start;
                    acc_with(&mut grads[a.0], src.rows, src.cols, |ga| {
                        let c = g.cols;
                        for (o, v) in ga.data[start * c..start * c + g.len()].iter_mut().zip(&g.data) {
                            *o += v;
                        }
                    });
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[a.0], Tensor::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let s = g.data[i];
                        ga.row_mut(i).iter_mut().for_each(|v| *v = s);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv[r] * (gv - mg - yv * mgy);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = &node.value;
                    let c = y.cols;
                    let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg * c];
                    for (e, &s) in seg.iter().enumerate() {
                        for k in 0..c {
                            dot[s * c + k] += g.at(e, k) * y.at(e, k);
                        }
                    }
                    let mut ga = Tensor::zeros(y.rows, c);
                    for (e, &s) in seg.iter().enumerate() {
                        for k in 0..c {
                            *ga.at_mut(e, k) = y.at(e, k) * (g.at(e, k) - dot[s * c + k]);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Rbf(d, centers, gamma) => {
                    let dv = val(*d);
                    let y = &node.value;
                    let s = (0..dv.rows)
                        .map(|e| {
                            let de = dv.data[e];
                            centers
                                .iter()
                                .enumerate()
                                .map(|(r, c)| g.at(e, r) * y.at(e, r) * (-2.0 * gamma * (de - c)))
                                .sum()
                        })
                        .collect();
                    accumulate(&mut grads[d.0], Tensor::from_vec(dv.rows, 1, s));
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows {
                        let gs: f64 = g.row(r).iter().sum();
                        for (o, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= yv.exp() * gs;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSumExp(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let l = y.data[r];
                        let gr = g.data[r];
                        for (o, xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = gr * (xv - l).exp();
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MaskedAddRows(x, d, mask) => {
                    if wants(*d) {
                        let mut gd = g.clone();
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                gd.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                        accumulate(&mut grads[d.0], gd);
                    }
                    if wants(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
            }
        }
        Grads { grads }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(build(x))/dx against central differences on every entry of x.
    fn check(build: impl Fn(&Tape, Var) -> Var, x0: Tensor) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows, x0.cols));
        let eps = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[i] += delta;
                let t = Tape::new();
                let v = t.leaf(xp);
                let out = build(&t, v);
                t.scalar_value(out)
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data[i];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + num.abs()),
                "entry {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, 4, 3);
        let r = rand_tensor(&mut rng, 1, 3);
        check(
            |t, x| {
                let wv = t.constant(w.clone());
                let rv = t.constant(r.clone());
                let h = t.add_row(t.matmul(x, wv), rv);
                let h = t.softplus(h);
                let h = t.mul(h, t.exp(t.scale(h, -0.3)));
                let h = t.sqrt(t.add_scalar(t.square(h), 1.0));
                t.sum_all(t.ln(t.recip(h)))
            },
            rand_tensor(&mut rng, 5, 4),
        );
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx: Rc<[usize]> = vec![0, 2, 2, 1, 3, 0].into();
        let seg: Rc<[usize]> = vec![0, 0, 1, 1, 1, 2].into();
        check(
            |t, x| {
                let g = t.gather_rows(x, idx.clone());
                let s = t.segment_softmax(g, seg.clone(), 3);
                let sc = t.scatter_add_rows(t.mul(s, g), seg.clone(), 3);
                let cat = t.concat_cols(&[sc, t.slice_rows(t.slice_cols(x, 1, 2), 0, 3)]);
                let stacked = t.concat_rows(&[cat, t.slice_rows(cat, 1, 2)]);
                let ln = t.layer_norm(stacked, 1e-5);
                let lse = t.logsumexp_rows(ln);
                let ls = t.log_softmax(ln);
                let col = t.row_sum(ls);
                t.sum_all(t.add(t.mul_col(lse, col), t.square(lse)))
            },
            rand_tensor(&mut rng, 4, 3),
        );
    }

    #[test]
    fn rbf_and_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers: Rc<[f64]> = vec![0.0, 0.5, 1.0, 1.5].into();
        let mask: Rc<[bool]> = vec![true, false, true].into();
        check(
            |t, x| {
                let d = t.slice_cols(x, 0, 1);
                let r = t.rbf(d, centers.clone(), 2.0);
                let m = t.masked_add_rows(x, t.silu(t.slice_cols(r, 0, 3)), mask.clone());
                t.sum_all(t.square(m))
            },
            rand_tensor(&mut rng, 3, 3),
        );
    }

    #[test]
    fn masked_rows_copied_exactly() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_vec(2, 1, vec![0.1, 0.2]));
        let d = t.leaf(Tensor::from_vec(2, 1, vec![f64::NAN, 1.0]));
        let y = t.masked_add_rows(x, d, vec![false, true].into());
        assert_eq!(t.value(y).data[0].to_bits(), 0.1f64.to_bits());
    }
}
