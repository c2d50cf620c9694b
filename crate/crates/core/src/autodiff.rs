//! Reverse-mode differentiation over the small, closed set of tensor
//! operations the query-embedding model is built from, plus Adam.
//!
//! Tensors have rank at most 2 and are stored row-major. A [`Tape`] borrows a
//! [`ParamStore`] read-only; parameters enter the graph through [`Tape::gather`]
//! (one embedding row), [`Tape::affine`] (a weight matrix with a bias row) or
//! [`Tape::param`] (a whole tensor). [`Tape::backward`] walks the tape once
//! in reverse and returns [`Gradients`], sparse by row for gathered tables.
//!
//! Shape mismatches are programming errors and panic with the op name and
//! the offending shapes.
//!
//! Subgradient conventions: `relu'(0) = 0`, `sign(0) = 0` in the L1 distance,
//! and ties in `elementwise_max` route the gradient to the first operand.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("loss must be a scalar, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    /// A `1 x n` row vector.
    pub fn vector(data: Vec<T>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter tensors, addressed by insertion index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Grad<T> {
    Dense(Vec<T>),
    Rows(BTreeMap<usize, Vec<T>>),
}

/// Parameter gradients. Gathered tables accumulate per row; everything else
/// is dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Grad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self { shapes: params.params.iter().map(|p| p.value.shape()).collect(), grads: vec![None; params.len()] }
    }

    fn add_row(&mut self, id: ParamId, row: usize, g: &[T]) {
        let cols = self.shapes[id.0].1;
        match &mut self.grads[id.0] {
            slot @ None => {
                let mut m = BTreeMap::new();
                m.insert(row, g.to_vec());
                *slot = Some(Grad::Rows(m));
            }
            Some(Grad::Rows(m)) => {
                let dst = m.entry(row).or_insert_with(|| vec![T::zero(); cols]);
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
            Some(Grad::Dense(d)) => {
                for (d, s) in d[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    fn dense_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        let (r, c) = self.shapes[id.0];
        let slot = &mut self.grads[id.0];
        match slot {
            Some(Grad::Dense(_)) => {}
            None => *slot = Some(Grad::Dense(vec![T::zero(); r * c])),
            Some(Grad::Rows(m)) => {
                let mut d = vec![T::zero(); r * c];
                for (row, g) in std::mem::take(m) {
                    d[row * c..(row + 1) * c].copy_from_slice(&g);
                }
                *slot = Some(Grad::Dense(d));
            }
        }
        match slot {
            Some(Grad::Dense(d)) => d,
            _ => unreachable!(),
        }
    }

    /// Dense copy of one parameter's gradient (zeros if untouched).
    pub fn dense(&self, id: ParamId) -> Vec<T> {
        let (r, c) = self.shapes[id.0];
        match &self.grads[id.0] {
            None => vec![T::zero(); r * c],
            Some(Grad::Dense(d)) => d.clone(),
            Some(Grad::Rows(m)) => {
                let mut d = vec![T::zero(); r * c];
                for (row, g) in m {
                    d[row * c..(row + 1) * c].copy_from_slice(g);
                }
                d
            }
        }
    }

    /// Whether the parameter received any gradient contribution.
    pub fn touched(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        assert_eq!(self.shapes, other.shapes, "gradient sets for different parameter stores");
        for (i, g) in other.grads.iter().enumerate() {
            match g {
                None => {}
                Some(Grad::Rows(m)) => {
                    for (row, v) in m {
                        self.add_row(ParamId(i), *row, v);
                    }
                }
                Some(Grad::Dense(d)) => {
                    let dst = self.dense_mut(ParamId(i));
                    for (a, b) in dst.iter_mut().zip(d) {
                        *a += *b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            match g {
                Grad::Dense(d) => d.iter_mut().for_each(|v| *v *= s),
                Grad::Rows(m) => m.values_mut().flatten().for_each(|v| *v *= s),
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| match g {
            Grad::Dense(d) => d.iter().all(|v| v.is_finite()),
            Grad::Rows(m) => m.values().flatten().all(|v| v.is_finite()),
        })
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Gather(ParamId, usize),
    Add(Var, Var),
    AddAll(Vec<Var>),
    Scale(Var, T),
    OffsetNeg(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Affine(ParamId, Var),
    Relu(Var),
    Softmax(Var),
    Max(Var, Var),
    Mul(Var, Var),
    WeightedSum(Var, Vec<Var>),
    L1(Var, Var),
    Sigmoid(Var),
    Bce(Var, Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn bce_eps<T: Scalar>() -> T {
    T::epsilon().max(T::lit(1e-12))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa == sb, "{op}: shape mismatch {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1);
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// The whole parameter tensor as a differentiable leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.get(id).clone();
        self.push(v, Op::Param(id))
    }

    /// Row `row` of an embedding table, as a `1 x cols` vector.
    pub fn gather(&mut self, table: ParamId, row: usize) -> Var {
        let t = self.params.get(table);
        assert!(row < t.rows(), "gather: row {row} out of range for {}x{} table", t.rows(), t.cols());
        let v = Tensor::vector(t.row(row).to_vec());
        self.push(v, Op::Gather(table, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let (r, c) = self.shape(a);
        let d = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| *x + *y).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Add(a, b))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_all: no operands");
        for &x in &xs[1..] {
            self.same_shape("add_all", xs[0], x);
        }
        let (r, c) = self.shape(xs[0]);
        let mut d = vec![T::zero(); r * c];
        for &x in xs {
            for (o, v) in d.iter_mut().zip(&self.value(x).data) {
                *o += *v;
            }
        }
        self.push(Tensor::from_vec(r, c, d), Op::AddAll(xs.to_vec()))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.shape(x);
        let d = self.value(x).data.iter().map(|v| *v * s).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Scale(x, s))
    }

    /// `c - x` for a constant `c`.
    pub fn offset_neg(&mut self, c: T, x: Var) -> Var {
        let (r, cols) = self.shape(x);
        let d = self.value(x).data.iter().map(|v| c - *v).collect();
        self.push(Tensor::from_vec(r, cols, d), Op::OffsetNeg(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, v| a + *v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Concatenation over the last dimension; all operands share a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no operands");
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert!(r == rows, "concat: row mismatch {r}x{c} vs {rows} rows");
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut d = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                d.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::from_vec(rows, cols, d), Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(r * c == rows * cols, "reshape: cannot view {r}x{c} as {rows}x{cols}");
        let d = self.value(x).data.clone();
        self.push(Tensor::from_vec(rows, cols, d), Op::Reshape(x))
    }

    /// `[x, 1] · W` for `W` of shape `(n + 1) x m` whose last row is the bias.
    pub fn affine(&mut self, w: ParamId, x: Var) -> Var {
        let wt = self.params.get(w);
        let n = self.value(x).len();
        assert!(
            wt.rows() == n + 1,
            "affine: weight {}x{} expects input of length {}, got {}",
            wt.rows(),
            wt.cols(),
            wt.rows() - 1,
            n
        );
        let m = wt.cols();
        let xv = &self.value(x).data;
        let mut out = wt.row(n).to_vec();
        for (i, xi) in xv.iter().enumerate() {
            if *xi == T::zero() {
                continue;
            }
            for (o, wij) in out.iter_mut().zip(wt.row(i)) {
                *o += *xi * *wij;
            }
        }
        debug_assert_eq!(out.len(), m);
        self.push(Tensor::vector(out), Op::Affine(w, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let d = self.value(x).data.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Relu(x))
    }

    /// Softmax over each row.
    pub fn softmax_last_dim(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut d = Vec::with_capacity(r * c);
        for row in 0..r {
            let vals = xv.row(row);
            let mx = vals.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
            let exps: Vec<T> = vals.iter().map(|v| (*v - mx).exp()).collect();
            let z = exps.iter().fold(T::zero(), |a, v| a + *v);
            d.extend(exps.into_iter().map(|e| e / z));
        }
        self.push(Tensor::from_vec(r, c, d), Op::Softmax(x))
    }

    pub fn elementwise_max(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("elementwise_max", a, b);
        let (r, c) = self.shape(a);
        let d = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| if *x >= *y { *x } else { *y }).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Max(a, b))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("elementwise_mul", a, b);
        let (r, c) = self.shape(a);
        let d = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| *x * *y).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Mul(a, b))
    }

    /// Mixes `m` equally shaped tensors of `n` elements.
    ///
    /// With `weights` of shape `1 x m` every element of operand `s` is scaled
    /// by `weights[s]`; with shape `n x m` element `j` of operand `s` is
    /// scaled by `weights[j, s]`.
    pub fn weighted_sum(&mut self, weights: Var, stack: &[Var]) -> Var {
        assert!(!stack.is_empty(), "weighted_sum: empty stack");
        for &s in &stack[1..] {
            self.same_shape("weighted_sum", stack[0], s);
        }
        let m = stack.len();
        let (r, c) = self.shape(stack[0]);
        let n = r * c;
        let (wr, wc) = self.shape(weights);
        let shared = wr == 1 && wc == m;
        assert!(
            shared || (wr == n && wc == m),
            "weighted_sum: weights {wr}x{wc} incompatible with {m} operands of {n} elements"
        );
        let w = &self.value(weights).data;
        let mut out = vec![T::zero(); n];
        for (s, &v) in stack.iter().enumerate() {
            for (j, (o, x)) in out.iter_mut().zip(&self.value(v).data).enumerate() {
                let wt = if shared { w[s] } else { w[j * m + s] };
                *o += wt * *x;
            }
        }
        self.push(Tensor::from_vec(r, c, out), Op::WeightedSum(weights, stack.to_vec()))
    }

    /// `sum_j |a_j - b_j|` as a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("l1_distance", a, b);
        let s = self.value(a).data.iter().zip(&self.value(b).data).fold(T::zero(), |acc, (x, y)| acc + (*x - *y).abs());
        self.push(Tensor::scalar(s), Op::L1(a, b))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let d = self.value(x).data.iter().map(|v| stable_sigmoid(*v)).collect();
        self.push(Tensor::from_vec(r, c, d), Op::Sigmoid(x))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped away from 0 and 1 so the loss stays finite.
    pub fn bce_loss(&mut self, probs: Var, labels: &[T]) -> Var {
        let n = self.value(probs).len();
        assert!(n == labels.len(), "bce_loss: {} probabilities vs {} labels", n, labels.len());
        assert!(n > 0, "bce_loss: empty input");
        let eps = bce_eps::<T>();
        let mut acc = T::zero();
        for (p, y) in self.value(probs).data.iter().zip(labels) {
            let p = p.max(eps).min(T::one() - eps);
            acc += *y * p.ln() + (T::one() - *y) * (T::one() - p).ln();
        }
        let loss = -acc / T::from_usize(n).expect("usize fits");
        self.push(Tensor::scalar(loss), Op::Bce(probs, labels.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter it
    /// reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let (lr, lc) = self.shape(loss);
        if lr * lc != 1 {
            return Err(AutodiffError::NonScalarLoss(lr, lc));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T>) {
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                slot @ None => *slot = Some(g.collect()),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let d = grads.dense_mut(*id);
                    d.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
                }
                Op::Gather(id, row) => grads.add_row(*id, *row, &g),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.iter().copied());
                    acc(&mut adj, *b, g.iter().copied());
                }
                Op::AddAll(xs) => {
                    for &x in xs {
                        acc(&mut adj, x, g.iter().copied());
                    }
                }
                Op::Scale(x, s) => acc(&mut adj, *x, g.iter().map(|v| *v * *s)),
                Op::OffsetNeg(x) => acc(&mut adj, *x, g.iter().map(|v| -*v)),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut adj, *x, std::iter::repeat_n(g[0], n));
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * cols + off..r * cols + off + pc]);
                        }
                        acc(&mut adj, p, gp.into_iter());
                        off += pc;
                    }
                }
                Op::Reshape(x) => acc(&mut adj, *x, g.iter().copied()),
                Op::Affine(w, x) => {
                    let wt = self.params.get(*w);
                    let xv = &self.value(*x).data;
                    let n = xv.len();
                    let gx: Vec<T> = (0..n)
                        .map(|i| wt.row(i).iter().zip(&g).fold(T::zero(), |a, (wij, gj)| a + *wij * *gj))
                        .collect();
                    let m = wt.cols();
                    let gw = grads.dense_mut(*w);
                    for (i, xi) in xv.iter().enumerate() {
                        if *xi == T::zero() {
                            continue;
                        }
                        for (dst, gj) in gw[i * m..(i + 1) * m].iter_mut().zip(&g) {
                            *dst += *xi * *gj;
                        }
                    }
                    for (dst, gj) in gw[n * m..(n + 1) * m].iter_mut().zip(&g) {
                        *dst += *gj;
                    }
                    acc(&mut adj, *x, gx.into_iter());
                }
                Op::Relu(x) => {
                    let xv = &self.value(*x).data;
                    acc(&mut adj, *x, xv.iter().zip(&g).map(|(x, g)| if *x > T::zero() { *g } else { T::zero() }));
                }
                Op::Softmax(x) => {
                    let (r, c) = node.value.shape();
                    let y = &node.value.data;
                    let mut gx = Vec::with_capacity(r * c);
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot = ys.iter().zip(gs).fold(T::zero(), |a, (y, g)| a + *y * *g);
                        gx.extend(ys.iter().zip(gs).map(|(y, g)| *y * (*g - dot)));
                    }
                    acc(&mut adj, *x, gx.into_iter());
                }
                Op::Max(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let first: Vec<bool> = av.iter().zip(bv).map(|(x, y)| *x >= *y).collect();
                    acc(&mut adj, *a, g.iter().zip(&first).map(|(g, f)| if *f { *g } else { T::zero() }));
                    acc(&mut adj, *b, g.iter().zip(&first).map(|(g, f)| if *f { T::zero() } else { *g }));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    acc(&mut adj, *a, g.iter().zip(bv).map(|(g, y)| *g * *y));
                    acc(&mut adj, *b, g.iter().zip(av).map(|(g, x)| *g * *x));
                }
                Op::WeightedSum(weights, stack) => {
                    let m = stack.len();
                    let w = &self.value(*weights).data;
                    let shared = self.shape(*weights).0 == 1 && w.len() == m;
                    let mut gw = vec![T::zero(); w.len()];
                    for (s, &v) in stack.iter().enumerate() {
                        let xv = &self.value(v).data;
                        let mut gs = Vec::with_capacity(xv.len());
                        for (j, (x, gj)) in xv.iter().zip(&g).enumerate() {
                            let (wi, wt) = if shared { (s, w[s]) } else { (j * m + s, w[j * m + s]) };
                            gw[wi] += *gj * *x;
                            gs.push(wt * *gj);
                        }
                        acc(&mut adj, v, gs.into_iter());
                    }
                    acc(&mut adj, *weights, gw.into_iter());
                }
                Op::L1(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let sign: Vec<T> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| {
                            let d = *x - *y;
                            if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(&mut adj, *a, sign.iter().map(|s| *s * g[0]));
                    acc(&mut adj, *b, sign.iter().map(|s| -*s * g[0]));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value.data;
                    acc(&mut adj, *x, y.iter().zip(&g).map(|(y, g)| *g * *y * (T::one() - *y)));
                }
                Op::Bce(p, labels) => {
                    let eps = bce_eps::<T>();
                    let n = T::from_usize(labels.len()).expect("usize fits");
                    let pv = &self.value(*p).data;
                    acc(
                        &mut adj,
                        *p,
                        pv.iter().zip(labels).map(|(p, y)| {
                            let p = p.max(eps).min(T::one() - eps);
                            g[0] * (-*y / p + (T::one() - *y) / (T::one() - p)) / n
                        }),
                    );
                }
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Parameters without gradient see a
    /// zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for id in params.ids() {
            let g = grads.dense(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.add(*n, t.clone());
        }
        s
    }

    /// Central differences of `f` with respect to every element of `params`.
    fn finite_diff(params: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-5;
        params
            .ids()
            .map(|id| {
                (0..params.get(id).len())
                    .map(|k| {
                        let mut p = params.clone();
                        p.get_mut(id).data_mut()[k] += h;
                        let up = f(&p);
                        p.get_mut(id).data_mut()[k] -= 2.0 * h;
                        let down = f(&p);
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_grad(params: &ParamStore<f64>, build: &dyn Fn(&mut Tape<'_, f64>) -> Var) {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff(params, &|p| {
            let mut t = Tape::new(p);
            let l = build(&mut t);
            t.value(l).item()
        });
        for id in params.ids() {
            let analytic = grads.dense(id);
            for (a, n) in analytic.iter().zip(&fd[id.0]) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-6, "{}: analytic {a} vs numeric {n}", params.name(id));
            }
        }
    }

    #[test]
    fn relu_local_gradient() {
        let p = store(&[("x", Tensor::vector(vec![2.0, -1.0, 0.0]))]);
        let mut t = Tape::new(&p);
        let x = t.param(ParamId(0));
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.dense(ParamId(0)), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_bce_gradient_is_p_minus_y() {
        for (z, y) in [(0.3, 1.0), (-1.7, 0.0), (2.5, 0.0), (-0.2, 1.0)] {
            let p = store(&[("z", Tensor::scalar(z))]);
            let mut t = Tape::new(&p);
            let zv = t.param(ParamId(0));
            let prob = t.sigmoid(zv);
            let l = t.bce_loss(prob, &[y]);
            let g = t.backward(l).unwrap().dense(ParamId(0))[0];
            let expected = 1.0 / (1.0 + f64::exp(-z)) - y;
            assert!((g - expected).abs() < 1e-12, "z={z} y={y}: {g} vs {expected}");
        }
    }

    #[test]
    fn max_routes_to_winner() {
        let p = store(&[("a", Tensor::vector(vec![1.0, -2.0, 5.0])), ("b", Tensor::vector(vec![0.0, 3.0, 5.0]))]);
        let mut t = Tape::new(&p);
        let (a, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
        let m = t.elementwise_max(a, b);
        assert_eq!(t.value(m).data(), &[1.0, 3.0, 5.0]);
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.dense(ParamId(0)), vec![1.0, 0.0, 1.0]);
        assert_eq!(g.dense(ParamId(1)), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let p = store(&[("x", Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]))]);
        let mut t = Tape::new(&p);
        let x = t.param(ParamId(0));
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().dense(ParamId(0)), vec![1.0; 4]);
    }

    #[test]
    fn shared_parameter_sums_branch_gradients() {
        let p = store(&[("x", Tensor::vector(vec![1.5, -0.5]))]);
        let mut t = Tape::new(&p);
        let x = t.param(ParamId(0));
        let a = t.scale(x, 3.0);
        let b = t.elementwise_mul(x, x);
        let c = t.add(a, b);
        let s = t.sum(c);
        // d/dx (3x + x^2) = 3 + 2x
        assert_eq!(t.backward(s).unwrap().dense(ParamId(0)), vec![6.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let p = store(&[]);
        let t = Tape::<f64>::new(&p);
        assert_eq!(t.backward(Var(0)).unwrap_err(), AutodiffError::EmptyTape);
        let mut t = Tape::new(&p);
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(t.backward(v).unwrap_err(), AutodiffError::NonScalarLoss(1, 2));
    }

    #[test]
    #[should_panic(expected = "add: shape mismatch")]
    fn shape_mismatch_names_op() {
        let p = store(&[]);
        let mut t = Tape::<f64>::new(&p);
        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0]));
        t.add(a, b);
    }

    #[test]
    fn gather_scatters_sparsely() {
        let p = store(&[("emb", Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))]);
        let mut t = Tape::new(&p);
        let r1 = t.gather(ParamId(0), 1);
        let r1b = t.gather(ParamId(0), 1);
        let s = t.add(r1, r1b);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.dense(ParamId(0)), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let p = store(&[
            ("a", Tensor::vector(vec![0.3, -0.7, 1.1, 0.2])),
            ("b", Tensor::vector(vec![-0.4, 0.9, 0.5, -1.3])),
            ("w", Tensor::from_vec(9, 4, (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect())),
            ("h", Tensor::from_vec(5, 8, (0..40).map(|i| ((i * 5 % 13) as f64 - 6.0) / 9.0).collect())),
            ("emb", Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 - 6.0) / 7.0).collect())),
        ]);
        let (a, b, w, h, emb) = (ParamId(0), ParamId(1), ParamId(2), ParamId(3), ParamId(4));
        check_grad(&p, &|t| {
            let (av, bv) = (t.param(a), t.param(b));
            let e = t.gather(emb, 2);
            let s = t.add(av, e);
            let x = t.concat(&[s, bv]);
            let hid = t.affine(w, x);
            let hid = t.relu(hid);
            let logits = t.affine(h, hid);
            let logits = t.reshape(logits, 4, 2);
            let wts = t.softmax_last_dim(logits);
            let mix = t.weighted_sum(wts, &[av, bv]);
            let mx = t.elementwise_max(mix, bv);
            let prod = t.elementwise_mul(mx, av);
            let d = t.l1_distance(prod, e);
            let z = t.offset_neg(1.5, d);
            let z2 = t.scale(z, 0.5);
            let gate_in = t.concat(&[z2, z]);
            let gate = t.softmax_last_dim(gate_in);
            let mixed = t.weighted_sum(gate, &[z2, z]);
            let both = t.concat(&[mixed, z]);
            let probs = t.sigmoid(both);
            let l = t.bce_loss(probs, &[1.0, 0.0]);
            let total = t.add_all(&[l, l, d]);
            t.sum(total)
        });
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = store(&[]);
        let mut t = Tape::<f64>::new(&p);
        let x = t.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 700.0]));
        let y = t.softmax_last_dim(x);
        for r in 0..2 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = t.constant(Tensor::from_vec(2, 3, vec![11.0, 12.0, 13.0, -40.0, 10.0, 710.0]));
        let y2 = t.softmax_last_dim(shifted);
        for (u, v) in t.value(y).data().iter().zip(t.value(y2).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = store(&[("x", Tensor::vector(vec![0.25, -3.0]))]);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Gradients::zeros_like(&p);
        st.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = store(&[("x", Tensor::vector(vec![0.0]))]);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&p, cfg);
        let mut g = Gradients::zeros_like(&p);
        g.dense_mut(ParamId(0))[0] = 0.37;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.get(ParamId(0)).data()[0];
            st.step(&mut p, &g);
            last = before - p.get(ParamId(0)).data()[0];
        }
        assert!((last / cfg.lr - 1.0).abs() < 1e-6, "step ratio {}", last / cfg.lr);
        assert_eq!(st.steps(), 2000);
    }

    #[test]
    fn generic_over_f32() {
        let mut p = ParamStore::<f32>::new();
        let id = p.add("x", Tensor::vector(vec![1.0f32, -2.0]));
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let y = t.sigmoid(x);
        let l = t.bce_loss(y, &[1.0, 0.0]);
        let g = t.backward(l).unwrap().dense(id);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
