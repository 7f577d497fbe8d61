//! Minimal reverse-mode differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed, not copied; [`Tape::backward`] accumulates their gradients into
//! caller-owned buffers.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::scalar::Scalar;

pub type NodeId = usize;

pub const LN_EPS: f64 = 1e-5;

/// `x * sigmoid(GELU_K * (x + GELU_A * x^3))`, the tanh form of GELU.
pub(crate) const GELU_K: f64 = 1.595_769_121_605_730_7;
pub(crate) const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    /// Adds a `1 × n` row to every row.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        affine: Option<(NodeId, NodeId)>,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    /// Row-wise; masked columns get probability zero.
    Softmax(NodeId),
    Gather(NodeId, Vec<u32>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    /// Row `i` multiplied by a constant `w[i]`.
    ScaleRows(NodeId, Vec<T>),
    /// Element-wise product with a constant (already scaled) keep mask.
    Dropout(NodeId, Array2<T>),
    CrossEntropy(NodeId, usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Array2<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Array2<T>]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, T> {
        match self.nodes[id].op {
            Op::Param(p) => self.params[p].view(),
            _ => self.nodes[id].value.view(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Array2::zeros((0, 0)), Op::Param(index), &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(bias);
        self.push(v, Op::AddBias(a, bias), &[a, bias])
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let v = &self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a).to_owned();
        let s = gelu_sigmoid(&x);
        let v = &x * &s;
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(T::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, optionally
    /// followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: NodeId, affine: Option<(NodeId, NodeId)>) -> NodeId {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let value = match affine {
            Some((g, b)) => &(&xhat * &self.value(g)) + &self.value(b),
            None => xhat.clone(),
        };
        let inputs: Vec<NodeId> = match affine {
            Some((g, b)) => vec![x, g, b],
            None => vec![x],
        };
        self.push(value, Op::LayerNorm { x, affine, xhat, rstd }, &inputs)
    }

    pub fn softmax(&mut self, a: NodeId, mask: Option<Rc<[bool]>>) -> NodeId {
        let mut v = self.value(a).as_standard_layout().into_owned();
        for mut row in v.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            softmax_row(row, mask.as_deref());
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id as usize));
        }
        self.push(v, Op::Gather(table, ids.to_vec()), &[table])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("equal row counts")
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).as_standard_layout().into_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn scale_rows(&mut self, a: NodeId, w: Vec<T>) -> NodeId {
        let mut v = self.value(a).to_owned();
        for (mut row, &k) in v.rows_mut().into_iter().zip(&w) {
            row.mapv_inplace(|x| x * k);
        }
        self.push(v, Op::ScaleRows(a, w), &[a])
    }

    pub fn dropout(&mut self, a: NodeId, keep: Array2<T>) -> NodeId {
        let v = &self.value(a) * &keep;
        self.push(v, Op::Dropout(a, keep), &[a])
    }

    /// Negative log-likelihood of class `target` under `softmax(logits)`
    /// for a single `1 × k` row; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let l = self.value(logits);
        let row = l.row(0);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - row[target];
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy(logits, target), &[logits])
    }

    /// Back-propagates `seed * d(out)` and adds the parameter gradients to
    /// `grads` (indexed like the parameter slice).
    pub fn backward(&self, out: NodeId, seed: T, grads: &mut [Array2<T>]) {
        let mut g: Vec<Option<Array2<T>>> = (0..=out).map(|_| None).collect();
        let shape = self.value(out).raw_dim();
        g[out] = Some(Array2::from_elem(shape, seed));
        for id in (0..=out).rev() {
            let Some(gy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => grads[*p] += &gy,
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let d = gy.dot(&self.value(*b).t());
                        acc(&mut g, *a, d);
                    }
                    if self.needs(*b) {
                        let d = self.value(*a).t().dot(&gy);
                        acc(&mut g, *b, d);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let d = gy.dot(&self.value(*b));
                        acc(&mut g, *a, d);
                    }
                    if self.needs(*b) {
                        let d = gy.t().dot(&self.value(*a));
                        acc(&mut g, *b, d);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*b) {
                        let d = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut g, *b, d);
                    }
                    if self.needs(*a) {
                        acc(&mut g, *a, gy);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(&mut g, *b, gy.clone());
                    }
                    if self.needs(*a) {
                        acc(&mut g, *a, gy);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut g, *a, gy.mapv(|v| v * k));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let s = gelu_sigmoid(&x.to_owned());
                    let k = T::of(GELU_K);
                    let a3 = T::of(3.0 * GELU_A);
                    let mut d = gy;
                    ndarray::Zip::from(&mut d).and(&x).and(&s).for_each(|d, &x, &s| {
                        let ds = s * (T::one() - s) * k * (T::one() + a3 * x * x);
                        *d *= s + x * ds;
                    });
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = gy;
                    ndarray::Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= T::one() - y * y);
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm { x, affine, xhat, rstd } => {
                    let dxhat = match affine {
                        Some((gamma, beta)) => {
                            if self.needs(*gamma) {
                                let dg = (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                                acc(&mut g, *gamma, dg);
                            }
                            if self.needs(*beta) {
                                let db = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                                acc(&mut g, *beta, db);
                            }
                            &gy * &self.value(*gamma)
                        }
                        None => gy,
                    };
                    if self.needs(*x) {
                        let n = T::of(dxhat.ncols() as f64);
                        let mut dx = dxhat;
                        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                            let m1 = row.sum() / n;
                            let m2 = row.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
                            ndarray::Zip::from(&mut row)
                                .and(&xh)
                                .for_each(|d, &h| *d = r * (*d - m1 - h * m2));
                        }
                        acc(&mut g, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = gy;
                    for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let dot = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum::<T>();
                        ndarray::Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|d, &p| *d = p * (*d - dot));
                    }
                    acc(&mut g, *a, d);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut d = Array2::zeros(t.raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id as usize);
                        row += &gy.row(i);
                    }
                    acc(&mut g, *table, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.needs(p) {
                            let d = gy.slice(s![.., start..start + w]).as_standard_layout().into_owned();
                            acc(&mut g, p, d);
                        }
                        start += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                    acc(&mut g, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(&mut g, *a, d);
                }
                Op::ScaleRows(a, w) => {
                    let mut d = gy;
                    for (mut row, &k) in d.rows_mut().into_iter().zip(w) {
                        row.mapv_inplace(|x| x * k);
                    }
                    acc(&mut g, *a, d);
                }
                Op::Dropout(a, keep) => acc(&mut g, *a, &gy * keep),
                Op::CrossEntropy(logits, target) => {
                    let l = self.value(*logits);
                    let mut p = l.as_standard_layout().into_owned();
                    let row = p.as_slice_mut().expect("standard layout");
                    softmax_row(row, None);
                    row[*target] -= T::one();
                    let k = gy[[0, 0]];
                    acc(&mut g, *logits, p.mapv(|v| v * k));
                }
            }
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }
}

fn acc<T: Scalar>(g: &mut [Option<Array2<T>>], id: NodeId, d: Array2<T>) {
    match &mut g[id] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

fn gelu_sigmoid<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let k = T::of(GELU_K);
    let a = T::of(GELU_A);
    let mut s = x.mapv(|v| -(k * (v + a * v * v * v)));
    T::exp_in_place(s.as_slice_memory_order_mut().expect("contiguous"));
    s.mapv_inplace(|e| T::one() / (T::one() + e));
    s
}

/// In-place softmax with max subtraction; masked entries become zero.
pub fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    match mask {
        None => super::infer::softmax_in_place(row),
        Some(mask) => {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = *v - max);
            T::exp_in_place(row);
            for (v, &m) in row.iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
            let sum: T = row.iter().copied().sum();
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
}
