//! Reverse-mode differentiation over a per-update operation record.
//!
//! A [`Tape`] records matrix-level operations as they are evaluated. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for gradient accumulation. A tape is an ordinary value:
//! there is no global autodiff state, and dropping the tape discards the graph.
//!
//! All values are 2-D `[rows, cols]`. Shape agreement is the caller's
//! responsibility at this level; the primitive ops panic on mismatch, and the
//! layer APIs above them return [`Error::Shape`](crate::Error::Shape) instead.

use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Handle to a node on a [`Tape`].
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
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Elu(Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Var, Var),
    SliceCols { a: Var, start: usize },
    GroupSum { a: Var, group: usize },
    RepeatRows { a: Var, times: usize },
    TileGroups { a: Var, group: usize, times: usize },
    GatherCols { a: Var, idx: Vec<usize> },
    BroadcastCols(Var),
    Reshape(Var),
    LogSoftmax(Var),
    RowVecMat { q: Var, w: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zero when `v` was unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input, typically a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input (observations, masks, noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `a`'s current value.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.0].value.map(f);
        self.push(v, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, "elementwise op");
        let v = va.zip_map(vb, f).expect("checked shape");
        self.push(v, op, &[a, b])
    }

    /// `x · Wᵀ + b` for `x: [r, in]`, `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (r, k, o) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(wv.cols(), k, "linear: input width");
        assert_eq!(bv.len(), o, "linear: bias width");
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; r * o];
        for i in 0..r {
            let xr = &xd[i * k..(i + 1) * k];
            let yr = &mut out[i * o..(i + 1) * o];
            for (j, y) in yr.iter_mut().enumerate() {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = bd[j];
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                *y = acc;
            }
        }
        let v = Tensor::matrix(r, o, out).expect("linear shape");
        self.push(v, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::full(1, 1, s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let r = av.rows();
        let data = (0..r).map(|i| av.row_slice(i).iter().sum()).collect();
        let v = Tensor::matrix(r, 1, data).expect("sum_cols");
        self.push(v, Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.rows(), bv.rows(), "concat_cols: row count");
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row_slice(i));
            data.extend_from_slice(bv.row_slice(i));
        }
        let v = Tensor::matrix(r, ca + cb, data).expect("concat");
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.cols(), "slice_cols: out of range");
        let r = av.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row_slice(i)[start..start + len]);
        }
        let v = Tensor::matrix(r, len, data).expect("slice");
        self.push(v, Op::SliceCols { a, start }, &[a])
    }

    /// Sum consecutive blocks of `group` rows: `[g·n, c] -> [n, c]`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(group > 0 && av.rows().is_multiple_of(group), "group_sum: rows not divisible");
        let (n, c) = (av.rows() / group, av.cols());
        let mut data = vec![0.0; n * c];
        for i in 0..av.rows() {
            let dst = &mut data[(i / group) * c..(i / group + 1) * c];
            for (d, s) in dst.iter_mut().zip(av.row_slice(i)) {
                *d += s;
            }
        }
        let v = Tensor::matrix(n, c, data).expect("group_sum");
        self.push(v, Op::GroupSum { a, group }, &[a])
    }

    /// Repeat each row `times` times consecutively: `[n, c] -> [n·times, c]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(n * times * c);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(av.row_slice(i));
            }
        }
        let v = Tensor::matrix(n * times, c, data).expect("repeat_rows");
        self.push(v, Op::RepeatRows { a, times }, &[a])
    }

    /// Repeat each consecutive block of `group` rows `times` times:
    /// `[n·g, c] -> [n·times·g, c]`.
    pub fn tile_groups(&mut self, a: Var, group: usize, times: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(group > 0 && av.rows().is_multiple_of(group), "tile_groups: rows not divisible");
        let (n, c) = (av.rows() / group, av.cols());
        let block = group * c;
        let mut data = Vec::with_capacity(av.len() * times);
        for i in 0..n {
            let src = &av.data()[i * block..(i + 1) * block];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let v = Tensor::matrix(n * times * group, c, data).expect("tile_groups");
        self.push(v, Op::TileGroups { a, group, times }, &[a])
    }

    /// Pick one column per row: `[r, c] -> [r, 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows(), idx.len(), "gather_cols: one index per row");
        let data = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).collect();
        let v = Tensor::matrix(idx.len(), 1, data).expect("gather");
        self.push(v, Op::GatherCols { a, idx: idx.to_vec() }, &[a])
    }

    /// `[r, 1] -> [r, cols]` by copying the single column.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.cols(), 1, "broadcast_cols: input must be a column");
        let r = av.rows();
        let mut data = Vec::with_capacity(r * cols);
        for &x in av.data() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Tensor::matrix(r, cols, data).expect("broadcast");
        self.push(v, Op::BroadcastCols(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.nodes[a.0].value.clone().reshaped(rows, cols).expect("reshape");
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let v = Tensor::matrix(r, c, data).expect("log_softmax");
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    /// Per-row vector-matrix product. `q: [r, n]`, `w: [r, n·e]` holding an
    /// `n × e` matrix per row; returns `[r, e]`.
    pub fn rowvec_mat(&mut self, q: Var, w: Var) -> Var {
        let (qv, wv) = (&self.nodes[q.0].value, &self.nodes[w.0].value);
        let (r, n) = (qv.rows(), qv.cols());
        assert_eq!(wv.rows(), r, "rowvec_mat: rows");
        assert!(n > 0 && wv.cols() % n == 0, "rowvec_mat: width");
        let e = wv.cols() / n;
        let mut data = vec![0.0; r * e];
        for i in 0..r {
            let (qr, wr) = (qv.row_slice(i), wv.row_slice(i));
            let out = &mut data[i * e..(i + 1) * e];
            for (k, &qk) in qr.iter().enumerate() {
                for (o, wk) in out.iter_mut().zip(&wr[k * e..(k + 1) * e]) {
                    *o += qk * wk;
                }
            }
        }
        let v = Tensor::matrix(r, e, data).expect("rowvec_mat");
        self.push(v, Op::RowVecMat { q, w }, &[q, w])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        Ok(Gradients { grads, shapes })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (r, k, o) = (xv.rows(), xv.cols(), wv.rows());
                if self.want(*x) {
                    let mut dx = vec![0.0; r * k];
                    for i in 0..r {
                        let dxr = &mut dx[i * k..(i + 1) * k];
                        for j in 0..o {
                            let gij = g[i * o + j];
                            if gij != 0.0 {
                                for (d, wv) in dxr.iter_mut().zip(wv.row_slice(j)) {
                                    *d += gij * wv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.want(*w) {
                    let mut dw = vec![0.0; o * k];
                    for i in 0..r {
                        let xr = xv.row_slice(i);
                        for j in 0..o {
                            let gij = g[i * o + j];
                            if gij != 0.0 {
                                for (d, xv) in dw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                    *d += gij * xv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if self.want(*b) {
                    let mut db = vec![0.0; o];
                    for i in 0..r {
                        for (d, gv) in db.iter_mut().zip(&g[i * o..(i + 1) * o]) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.want(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.want(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.want(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.want(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.want(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = self.val(*b).data();
                if self.want(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                }
                if self.want(*b) {
                    let d = g.iter().zip(out).zip(bv).map(|((g, y), b)| -g * y / b).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let d = g.iter().zip(self.val(*a).data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                accumulate(grads, *a, d.collect())
            }
            Op::Abs(a) => {
                let d = g.iter().zip(self.val(*a).data()).map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, d.collect())
            }
            Op::Tanh(a) => accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Softplus(a) => {
                let d = g.iter().zip(self.val(*a).data()).map(|(g, x)| g * sigmoid(*x));
                accumulate(grads, *a, d.collect())
            }
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Ln(a) => accumulate(grads, *a, g.iter().zip(self.val(*a).data()).map(|(g, x)| g / x).collect()),
            Op::Sqrt(a) => accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect()),
            Op::Square(a) => {
                accumulate(grads, *a, g.iter().zip(self.val(*a).data()).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::Recip(a) => accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| -g * y * y).collect()),
            Op::Elu(a) => {
                let d = g.iter().zip(self.val(*a).data()).zip(out).map(|((g, x), y)| {
                    if *x > 0.0 {
                        *g
                    } else {
                        g * (y + 1.0)
                    }
                });
                accumulate(grads, *a, d.collect())
            }
            Op::SumAll(a) => {
                let n = self.val(*a).len();
                accumulate(grads, *a, vec![g[0]; n])
            }
            Op::SumCols(a) => {
                let c = self.val(*a).cols();
                accumulate(grads, *a, g.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect())
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.val(*a).cols(), self.val(*b).cols());
                let w = ca + cb;
                let r = g.len() / w;
                if self.want(*a) {
                    let d = (0..r).flat_map(|i| g[i * w..i * w + ca].iter().copied()).collect();
                    accumulate(grads, *a, d);
                }
                if self.want(*b) {
                    let d = (0..r).flat_map(|i| g[i * w + ca..(i + 1) * w].iter().copied()).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.val(*a);
                let (r, c) = (av.rows(), av.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, d)
            }
            Op::GroupSum { a, group } => {
                let av = self.val(*a);
                let c = av.cols();
                let d = (0..av.rows()).flat_map(|i| g[(i / group) * c..(i / group + 1) * c].iter().copied());
                accumulate(grads, *a, d.collect())
            }
            Op::RepeatRows { a, times } => {
                let av = self.val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for (i, gr) in g.chunks(c).enumerate() {
                    for (x, y) in d[(i / times) * c..(i / times + 1) * c].iter_mut().zip(gr) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, d)
            }
            Op::TileGroups { a, group, times } => {
                let av = self.val(*a);
                let block = group * av.cols();
                let mut d = vec![0.0; av.len()];
                for (i, gb) in g.chunks(block).enumerate() {
                    let src = i / times;
                    for (x, y) in d[src * block..(src + 1) * block].iter_mut().zip(gb) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, d)
            }
            Op::GatherCols { a, idx } => {
                let c = self.val(*a).cols();
                let mut d = vec![0.0; idx.len() * c];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                accumulate(grads, *a, d)
            }
            Op::BroadcastCols(a) => {
                let c = node.value.cols();
                accumulate(grads, *a, g.chunks(c).map(|r| r.iter().sum()).collect())
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * gs));
                }
                accumulate(grads, *a, d)
            }
            Op::RowVecMat { q, w } => {
                let (qv, wv) = (self.val(*q), self.val(*w));
                let (r, n) = (qv.rows(), qv.cols());
                let e = wv.cols() / n;
                if self.want(*q) {
                    let mut dq = vec![0.0; r * n];
                    for i in 0..r {
                        let (gr, wr) = (&g[i * e..(i + 1) * e], wv.row_slice(i));
                        for k in 0..n {
                            dq[i * n + k] = gr.iter().zip(&wr[k * e..(k + 1) * e]).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *q, dq);
                }
                if self.want(*w) {
                    let mut dw = vec![0.0; r * n * e];
                    for i in 0..r {
                        let (gr, qr) = (&g[i * e..(i + 1) * e], qv.row_slice(i));
                        for k in 0..n {
                            let base = i * n * e + k * e;
                            for (d, gv) in dw[base..base + e].iter_mut().zip(gr) {
                                *d = qr[k] * gv;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_gives_input_as_weight_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 1.0]));
        let w = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap());
        let b = tape.leaf(Tensor::row(&[0.0]));
        let y = tape.linear(x, w, b);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).data(), &[1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[3.0]));
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[6.0]);
    }

    #[test]
    fn constant_loss_leaves_parameters_at_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let c = tape.constant(Tensor::full(1, 1, 4.0));
        let loss = tape.sum_all(c);
        let g = tape.backward(loss).unwrap();
        assert!(!g.is_reached(p));
        assert_eq!(g.get(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[2.0]));
        let d = tape.detach(p);
        let y = tape.mul(p, d);
        let loss = tape.sum_all(y);
        // d(p * sg(p))/dp = sg(p) = 2
        assert_eq!(tape.backward(loss).unwrap().get(p).data(), &[2.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[1.5]));
        let y = tape.add(p, p);
        let loss = tape.sum_all(y);
        assert_eq!(tape.backward(loss).unwrap().get(p).data(), &[2.0]);
    }
}
