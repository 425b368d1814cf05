//! Matrix-valued reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value; [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. The trainer builds a fresh tape per step.
//!
//! Nodes created by [`Tape::constant`] or [`Tape::stop_gradient`] do not
//! require gradients, and nothing downstream of them propagates a gradient
//! back through them.

use std::rc::Rc;

use super::matrix::{check_finite, dot};
use super::{Matrix, NumError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Undirected neighbour lists over the rows of a node-state matrix.
pub type Adjacency = Rc<Vec<Vec<usize>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PairwiseSqDist(Var, Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    NeighborMean(Var, Adjacency),
    NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    Diagonal(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Gradients::get`] but materialises zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `sg[x]`: same value, zero upstream gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ`, the usual `out x in` linear layer applied to row vectors.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, NumError> {
        let value = self.value(x).matmul_nt(self.value(w))?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumError> {
        let value = self.value(x).scale(s)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Scale(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.value(x).map("relu", |v| v.max(0.0))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.value(x).map("exp", f64::exp)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Exp(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.value(x).softmax_rows()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.value(x).log_softmax_rows()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmaxRows(x), rg))
    }

    pub fn pairwise_sqdist(&mut self, q: Var, c: Var) -> Result<Var, NumError> {
        let value = Matrix::pairwise_sqdist(self.value(q), self.value(c))?;
        let rg = self.any_grad(&[q, c]);
        Ok(self.push(value, Op::PairwiseSqDist(q, c), rg))
    }

    /// Column means, `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.value(x).mean_rows()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).sum();
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Matrix::from_raw(1, 1, vec![s]), Op::Sum(x), rg))
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let m = self.value(x);
        if m.is_empty() {
            return Err(NumError::Empty { op: "mean" });
        }
        let s = m.sum() / m.len() as f64;
        check_finite("mean", &[s])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Matrix::from_raw(1, 1, vec![s]), Op::Mean(x), rg))
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var, NumError> {
        let value = self.value(x).gather_rows(ids)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GatherRows(x, ids.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of the output is the mean of the rows of `x` listed in
    /// `adjacency[i]`; an empty neighbour list yields a zero row.
    pub fn neighbor_mean(&mut self, x: Var, adjacency: Adjacency) -> Result<Var, NumError> {
        let xv = self.value(x);
        if adjacency.len() != xv.rows() {
            return Err(NumError::Dimension {
                op: "neighbor_mean",
                left: xv.shape(),
                right: (adjacency.len(), 0),
            });
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for (i, nbrs) in adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let row = out.row_mut(i);
            for &j in nbrs {
                if j >= xv.rows() {
                    return Err(NumError::Index {
                        op: "neighbor_mean",
                        index: j,
                        len: xv.rows(),
                    });
                }
                for (o, &v) in row.iter_mut().zip(xv.row(j)) {
                    *o += v;
                }
            }
            let inv = 1.0 / nbrs.len() as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NeighborMean(x, adjacency), rg))
    }

    /// Scales every row to unit L2 norm. A zero row is a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let norm = dot(xv.row(r), xv.row(r)).sqrt();
            if norm == 0.0 {
                return Err(NumError::ZeroNorm { row: r });
            }
            for v in out.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        check_finite("normalize_rows", out.data())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NormalizeRows(x, norms), rg))
    }

    /// Row-wise dot products, `n x d, n x d -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumError::Dimension {
                op: "row_dot",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let data: Vec<f64> = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        check_finite("row_dot", &data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Matrix::from_raw(data.len(), 1, data), Op::RowDot(a, b), rg))
    }

    /// Main diagonal of a square matrix as an `n x 1` column.
    pub fn diagonal(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(NumError::NotSquare { shape: xv.shape() });
        }
        let data: Vec<f64> = (0..xv.rows()).map(|i| xv.get(i, i)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Matrix::from_raw(data.len(), 1, data), Op::Diagonal(x), rg))
    }

    /// Straight-through estimator `sg[q - e] + e`. The forward value is `q`
    /// exactly; the backward pass hands the incoming gradient to `e`
    /// unchanged and nothing to `q`.
    pub fn straight_through(&mut self, e: Var, q: Var) -> Result<Var, NumError> {
        let (ev, qv) = (self.value(e), self.value(q));
        if ev.shape() != qv.shape() {
            return Err(NumError::Dimension {
                op: "straight_through",
                left: ev.shape(),
                right: qv.shape(),
            });
        }
        let value = qv.clone();
        let rg = self.any_grad(&[e]);
        Ok(self.push(value, Op::StraightThrough(e), rg))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumError> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(NumError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<(), NumError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::Linear(x, w) => {
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.matmul(self.value(*w))?);
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, g.matmul_tn(self.value(*x))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0)?);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)?),
            Op::Relu(x) => {
                let mask = self.value(*x).map("relu'", |v| if v > 0.0 { 1.0 } else { 0.0 })?;
                self.accumulate(grads, *x, g.hadamard(&mask)?);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.hadamard(y)?),
            Op::SoftmaxRows(x) => {
                let mut dx = g.hadamard(y)?;
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for (d, &p) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= p * s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let s = g.row(r).iter().fold(0.0, |a, &v| a + v);
                    for (d, &ls) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= ls.exp() * s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PairwiseSqDist(q, c) => {
                let (qv, cv) = (self.value(*q), self.value(*c));
                if self.requires_grad(*q) {
                    // dq_i = 2 (rowsum(G)_i q_i - (G C)_i)
                    let gc = g.matmul(cv)?;
                    let rs = g.sum_rows();
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    for i in 0..qv.rows() {
                        for ((d, &qi), &gci) in dq.row_mut(i).iter_mut().zip(qv.row(i)).zip(gc.row(i)) {
                            *d = 2.0 * (rs[i] * qi - gci);
                        }
                    }
                    self.accumulate(grads, *q, dq);
                }
                if self.requires_grad(*c) {
                    // dc_j = 2 (colsum(G)_j c_j - (Gᵀ Q)_j)
                    let gq = g.matmul_tn(qv)?;
                    let mut cs = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, &v) in cs.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let mut dc = Matrix::zeros(cv.rows(), cv.cols());
                    for j in 0..cv.rows() {
                        for ((d, &cj), &gqj) in dc.row_mut(j).iter_mut().zip(cv.row(j)).zip(gq.row(j)) {
                            *d = 2.0 * (cs[j] * cj - gqj);
                        }
                    }
                    self.accumulate(grads, *c, dc);
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let inv = 1.0 / n as f64;
                let mut dx = Matrix::zeros(n, g.cols());
                for r in 0..n {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.data()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                let v = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, v));
            }
            Op::GatherRows(x, ids) => {
                if self.requires_grad(*x) {
                    let (r, c) = self.value(*x).shape();
                    let slot = grads[x.0].get_or_insert_with(|| Matrix::zeros(r, c));
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, &gv) in slot.row_mut(id).iter_mut().zip(g.row(k)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let ids: Vec<usize> = (offset..offset + rows).collect();
                        self.accumulate(grads, p, g.gather_rows(&ids)?);
                    }
                    offset += rows;
                }
            }
            Op::NeighborMean(x, adjacency) => {
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for (i, nbrs) in adjacency.iter().enumerate() {
                    if nbrs.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / nbrs.len() as f64;
                    for &j in nbrs {
                        for (d, &gv) in dx.row_mut(j).iter_mut().zip(g.row(i)) {
                            *d += gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows(x, norms) => {
                // dx = (g - y (y·g)) / |x|
                let mut dx = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let yg = dot(y.row(r), g.row(r));
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = (*d - yv * yg) / norm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = bv.clone();
                    for r in 0..da.rows() {
                        let s = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = av.clone();
                    for r in 0..db.rows() {
                        let s = g.get(r, 0);
                        db.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Diagonal(x) => {
                let n = g.rows();
                let mut dx = Matrix::zeros(n, n);
                for i in 0..n {
                    dx.data_mut()[i * n + i] = g.get(i, 0);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StraightThrough(e) => self.accumulate(grads, *e, g.clone()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&[1.0, -2.0, 3.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.scalar(s), 14.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&[2.0]).unwrap());
        let sg = t.stop_gradient(x);
        let y = t.mul(sg, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        // d/dx (sg[x] * x) = sg[x] = 2, not 2x = 4
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
        assert!(g.get(sg).is_none());
    }

    #[test]
    fn straight_through_forward_is_quantized_value() {
        let mut t = Tape::new();
        let e = t.param(Matrix::row_vector(&[0.1, 0.2]).unwrap());
        let q = t.param(Matrix::row_vector(&[0.3, -0.7]).unwrap());
        let st = t.straight_through(e, q).unwrap();
        assert_eq!(t.value(st), t.value(q));
        let w = t.constant(Matrix::row_vector(&[3.0, 5.0]).unwrap());
        let y = t.mul(st, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(e).unwrap().data(), &[3.0, 5.0]);
        assert!(g.get(q).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(NumError::NotScalar { .. })));
    }

    #[test]
    fn normalize_zero_row_is_error() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(1, 3));
        assert!(matches!(t.normalize_rows(x), Err(NumError::ZeroNorm { row: 0 })));
    }

    #[test]
    fn neighbor_mean_of_isolated_node_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let adj: Adjacency = Rc::new(vec![vec![1, 2], vec![0], vec![]]);
        let y = t.neighbor_mean(x, adj).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 5.0, 1.0, 2.0, 0.0, 0.0]);
    }
}
