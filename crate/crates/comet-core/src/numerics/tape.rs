//! Reverse-mode automatic differentiation over `Mat`.
//!
//! Define-by-run: each op evaluates eagerly and records its parents on the
//! tape. `backward` walks the tape once in reverse, accumulating adjoints
//! for every node reachable from a scalar output. Leaves collect gradients;
//! constants do not. Shape mismatches are programming errors and panic —
//! validated entry points live above this layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::{self, Mat};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Gradient target.
    Leaf,
    /// No gradient.
    Const,
    /// A · B.
    MatMul(NodeId, NodeId),
    /// A · Bᵀ.
    MatMulTb(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// a (n×m) + b (1×m), b repeated down the rows.
    AddRowBroadcast(NodeId, NodeId),
    /// a (n×m) + b (n×1), b repeated across the columns.
    AddColBroadcast(NodeId, NodeId),
    /// a (n×m) ⊙ b (1×m), b repeated down the rows.
    MulRowBroadcast(NodeId, NodeId),
    /// a (n×m) ⊙ b (n×1), b repeated across the columns.
    MulColBroadcast(NodeId, NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// 1×m vector of column sums.
    ColSums(NodeId),
    /// n×1 vector of row sums.
    RowSums(NodeId),
    /// Row k of the output is row indices[k] of the parent.
    GatherRows(NodeId, Vec<usize>),
    /// n×1; entry k is parent[k, cols[k]].
    TakePerRow(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    /// Stack inputs vertically; all share a column count.
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Forward value is the recorded constant; backward passes the adjoint
    /// through to the parent unchanged (straight-through estimator).
    StraightThrough(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one `backward` call, indexed by `NodeId`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// None for constants and nodes the output does not depend on.
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar_value on non-scalar node");
        v.at(0, 0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_tb(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMulTb(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut v = va.clone();
        v.add_scaled(vb, 1.0);
        let rg = self.rg2(a, b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let v = va.sub(vb);
        let rg = self.rg2(a, b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data).unwrap();
        let rg = self.rg2(a, b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.requires_grad(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let rg = self.requires_grad(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows(), 1, "row-broadcast rhs must be 1×m");
        assert_eq!(va.cols(), vb.cols(), "row-broadcast width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, y) in row.iter_mut().zip(vb.row(0)) {
                *x += y;
            }
        }
        let rg = self.rg2(a, b);
        self.push(v, Op::AddRowBroadcast(a, b), rg)
    }

    pub fn add_col_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.cols(), 1, "col-broadcast rhs must be n×1");
        assert_eq!(va.rows(), vb.rows(), "col-broadcast height mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            let add = vb.at(r, 0);
            for x in v.row_mut(r) {
                *x += add;
            }
        }
        let rg = self.rg2(a, b);
        self.push(v, Op::AddColBroadcast(a, b), rg)
    }

    pub fn mul_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows(), 1, "row-broadcast rhs must be 1×m");
        assert_eq!(va.cols(), vb.cols(), "row-broadcast width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, y) in row.iter_mut().zip(vb.row(0)) {
                *x *= y;
            }
        }
        let rg = self.rg2(a, b);
        self.push(v, Op::MulRowBroadcast(a, b), rg)
    }

    pub fn mul_col_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.cols(), 1, "col-broadcast rhs must be n×1");
        assert_eq!(va.rows(), vb.rows(), "col-broadcast height mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            let f = vb.at(r, 0);
            for x in v.row_mut(r) {
                *x *= f;
            }
        }
        let rg = self.rg2(a, b);
        self.push(v, Op::MulColBroadcast(a, b), rg)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { math::exp(x) - 1.0 });
        let rg = self.requires_grad(a);
        self.push(v, Op::Elu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + math::exp(-x)));
        let rg = self.requires_grad(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::tanh);
        let rg = self.requires_grad(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::exp);
        let rg = self.requires_grad(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_into(va.row(r), v.row_mut(r));
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let src = va.row(r);
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = math::ln(src.iter().map(|&x| math::exp(x - max)).sum::<f64>()) + max;
            for (d, &x) in v.row_mut(r).iter_mut().zip(src) {
                *d = x - lse;
            }
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).data().iter().sum());
        let rg = self.requires_grad(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(!va.is_empty(), "mean_all of empty matrix");
        let v = Mat::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        let rg = self.requires_grad(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (d, &x) in v.row_mut(0).iter_mut().zip(va.row(r)) {
                *d += x;
            }
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::ColSums(a), rg)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            v.set(r, 0, va.row(r).iter().sum());
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::RowSums(a), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(indices.len(), va.cols());
        for (k, &idx) in indices.iter().enumerate() {
            assert!(idx < va.rows(), "gather_rows index out of range");
            v.row_mut(k).copy_from_slice(va.row(idx));
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::GatherRows(a, indices), rg)
    }

    pub fn take_per_row(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let va = self.value(a);
        assert_eq!(cols.len(), va.rows(), "take_per_row needs one column per row");
        let mut v = Mat::zeros(va.rows(), 1);
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < va.cols(), "take_per_row column out of range");
            v.set(r, 0, va.at(r, c));
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::TakePerRow(a, cols), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols height mismatch");
        let mut v = Mat::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            let row = v.row_mut(r);
            row[..va.cols()].copy_from_slice(va.row(r));
            row[va.cols()..].copy_from_slice(vb.row(r));
        }
        let rg = self.rg2(a, b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Mat::zeros(total, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows width mismatch");
            for r in 0..vp.rows() {
                v.row_mut(at + r).copy_from_slice(vp.row(r));
            }
            at += vp.rows();
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let va = self.value(a);
        assert!(start < end && end <= va.cols(), "slice_cols range invalid");
        let mut v = Mat::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    /// Forward `forced`, backward identity into `a` (straight-through).
    pub fn straight_through(&mut self, a: NodeId, forced: Mat) -> NodeId {
        assert_eq!(self.value(a).shape(), forced.shape(), "straight_through shape");
        let rg = self.requires_grad(a);
        self.push(forced, Op::StraightThrough(a), rg)
    }

    /// Reverse pass from a 1×1 output node. Returns the adjoint of every
    /// gradient-requiring node the output depends on.
    pub fn backward(&self, out: NodeId) -> Gradients {
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(1.0));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Keep only leaf adjoints plus any node the caller may query;
        // interior adjoints stay available — they cost memory only until
        // the Gradients value is dropped.
        Gradients { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    mat::matmul_tb_acc(g, self.value(*b), ga);
                }
                if self.requires_grad(*b) {
                    let gb = ensure(grads, *b, self.value(*b).shape());
                    mat::matmul_ta_acc(self.value(*a), g, gb);
                }
            }
            Op::MatMulTb(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    mat::matmul_acc(g, self.value(*b), ga);
                }
                if self.requires_grad(*b) {
                    let gb = ensure(grads, *b, self.value(*b).shape());
                    mat::matmul_ta_acc(g, self.value(*a), gb);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
                if self.requires_grad(*b) {
                    ensure(grads, *b, g.shape()).add_scaled(g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
                if self.requires_grad(*b) {
                    ensure(grads, *b, g.shape()).add_scaled(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).clone();
                    let ga = ensure(grads, *a, g.shape());
                    for ((d, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).clone();
                    let gb = ensure(grads, *b, g.shape());
                    for ((d, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, *s);
                }
            }
            Op::AddScalar(a) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = ensure(grads, *b, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (d, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddColBroadcast(a, b) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = ensure(grads, *b, (g.rows(), 1));
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        gb.data_mut()[r] += s;
                    }
                }
            }
            Op::MulRowBroadcast(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).clone();
                    let ga = ensure(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        for ((d, &gv), &bv) in
                            ga.row_mut(r).iter_mut().zip(g.row(r)).zip(vb.row(0))
                        {
                            *d += gv * bv;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).clone();
                    let gb = ensure(grads, *b, (1, g.cols()));
                    for r in 0..g.rows() {
                        for ((d, &gv), &av) in
                            gb.row_mut(0).iter_mut().zip(g.row(r)).zip(va.row(r))
                        {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::MulColBroadcast(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).clone();
                    let ga = ensure(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let f = vb.at(r, 0);
                        for (d, &gv) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gv * f;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).clone();
                    let gb = ensure(grads, *b, (g.rows(), 1));
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                        gb.data_mut()[r] += s;
                    }
                }
            }
            Op::Elu(a) => {
                if self.requires_grad(*a) {
                    // f'(x) = 1 for x > 0, exp(x) = f(x) + 1 otherwise.
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for ((d, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * if yv > 0.0 { 1.0 } else { yv + 1.0 };
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires_grad(*a) {
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for ((d, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.requires_grad(*a) {
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for ((d, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Exp(a) => {
                if self.requires_grad(*a) {
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for ((d, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, z)| x * z).sum();
                        for ((d, &gv), &yv) in
                            ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let y = self.nodes[i].value.clone();
                    let ga = ensure(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for ((d, &gv), &yv) in
                            ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *d += gv - math::exp(yv) * gsum;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.requires_grad(*a) {
                    let gv = g.at(0, 0);
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for d in ga.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len() as f64;
                    let gv = g.at(0, 0) / n;
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for d in ga.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::ColSums(a) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for r in 0..ga.rows() {
                        for (d, &x) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::RowSums(a) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for r in 0..ga.rows() {
                        let gv = g.at(r, 0);
                        for d in ga.row_mut(r) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for (k, &idx) in indices.iter().enumerate() {
                        for (d, &x) in ga.row_mut(idx).iter_mut().zip(g.row(k)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::TakePerRow(a, cols) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for (r, &c) in cols.iter().enumerate() {
                        let cur = ga.at(r, c);
                        ga.set(r, c, cur + g.at(r, 0));
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let wa = self.value(*a).cols();
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for r in 0..g.rows() {
                        for (d, &x) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..wa]) {
                            *d += x;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = ensure(grads, *b, self.value(*b).shape());
                    for r in 0..g.rows() {
                        for (d, &x) in gb.row_mut(r).iter_mut().zip(&g.row(r)[wa..]) {
                            *d += x;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let gp = ensure(grads, p, self.value(p).shape());
                        for r in 0..rows {
                            for (d, &x) in gp.row_mut(r).iter_mut().zip(g.row(at + r)) {
                                *d += x;
                            }
                        }
                    }
                    at += rows;
                }
            }
            Op::SliceCols(a, start, _end) => {
                if self.requires_grad(*a) {
                    let ga = ensure(grads, *a, self.value(*a).shape());
                    for r in 0..g.rows() {
                        for (d, &x) in ga.row_mut(r)[*start..*start + g.cols()]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *d += x;
                        }
                    }
                }
            }
            Op::StraightThrough(a) => {
                if self.requires_grad(*a) {
                    ensure(grads, *a, g.shape()).add_scaled(g, 1.0);
                }
            }
        }
    }
}

fn ensure(grads: &mut [Option<Mat>], id: NodeId, shape: (usize, usize)) -> &mut Mat {
    grads[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

/// Max-stabilized softmax of `src` into `dst`.
pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = math::exp(x - max);
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::fd_gradient_slice;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// |analytic − fd| must stay within max(1e-8, 1e-4·max(|a|,|f|)).
    fn assert_close_to_fd(analytic: &[f64], fd: &[f64]) {
        assert_eq!(analytic.len(), fd.len());
        for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
            let tol = 1e-8_f64.max(1e-4 * a.abs().max(f.abs()));
            assert!(
                (a - f).abs() <= tol,
                "coordinate {i}: analytic {a} vs fd {f} (tol {tol})"
            );
        }
    }

    /// Runs one scalar-valued tape program twice: once for the analytic
    /// gradient of its single leaf, once through the FD oracle.
    fn check_program(rows: usize, cols: usize, seed: u64, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5));

        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = build(&mut tape, leaf);
        let mut grads = tape.backward(out);
        let analytic = grads.take(leaf).expect("leaf must receive a gradient");

        let fd = fd_gradient_slice(
            &mut |v: &[f64]| {
                let m = Mat::from_vec(rows, cols, v.to_vec()).unwrap();
                let mut t = Tape::new();
                let l = t.leaf(m);
                let o = build(&mut t, l);
                t.scalar_value(o)
            },
            x.data(),
            1e-4,
        );
        assert_close_to_fd(analytic.data(), &fd);
    }

    #[test]
    fn elementwise_chain_matches_fd() {
        check_program(3, 4, 11, |t, x| {
            let a = t.elu(x);
            let b = t.tanh(a);
            let c = t.sigmoid(b);
            let d = t.mul(c, c);
            t.sum_all(d)
        });
    }

    #[test]
    fn matmul_paths_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let wc = w.clone();
        check_program(5, 3, 8, move |t, x| {
            let wn = t.constant(wc.clone());
            let h = t.matmul_tb(x, wn); // 5×4
            let hh = t.matmul(h, wn); // back to 5×3
            let sq = t.mul(hh, hh);
            t.mean_all(sq)
        });
    }

    #[test]
    fn softmax_and_log_softmax_match_fd() {
        check_program(4, 5, 21, |t, x| {
            let s = t.softmax_rows(x);
            let l = t.log_softmax_rows(x);
            let p = t.mul(s, l); // −entropy per entry
            t.sum_all(p)
        });
    }

    #[test]
    fn reductions_and_broadcasts_match_fd() {
        check_program(4, 3, 33, |t, x| {
            let cs = t.col_sums(x); // 1×3
            let rs = t.row_sums(x); // 4×1
            let a = t.add_row_broadcast(x, cs);
            let b = t.add_col_broadcast(a, rs);
            let m = t.mul_row_broadcast(b, cs);
            let n = t.mul_col_broadcast(m, rs);
            let shrunk = t.scale(n, 0.01);
            let e = t.exp(shrunk);
            t.mean_all(e)
        });
    }

    #[test]
    fn gather_take_concat_slice_match_fd() {
        check_program(5, 4, 55, |t, x| {
            let g = t.gather_rows(x, alloc::vec![4, 0, 2, 2]);
            let tk = t.take_per_row(g, alloc::vec![1, 3, 0, 2]); // 4×1
            let sl = t.slice_cols(g, 1, 3); // 4×2
            let cc = t.concat_cols(sl, tk); // 4×3
            let st = t.concat_rows(&[cc, cc]); // 8×3
            let sq = t.mul(st, st);
            t.sum_all(sq)
        });
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut t = Tape::new();
        let z = t.leaf(Mat::from_vec(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let forced = Mat::from_vec(2, 2, alloc::vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let st = t.straight_through(z, forced.clone());
        assert_eq!(t.value(st), &forced);
        let sq = t.mul(st, st);
        let out = t.sum_all(sq);
        let mut grads = t.backward(out);
        // d(Σ y²)/dy = 2y evaluated at the forced value, routed straight to z.
        let gz = grads.take(z).unwrap();
        assert_eq!(gz.data(), &[20.0, 40.0, 60.0, 80.0]);
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(2.0));
        let c = t.constant(Mat::scalar(3.0));
        let p = t.mul(x, c);
        let out = t.sum_all(p);
        let grads = t.backward(out);
        assert_eq!(grads.get(x).unwrap().at(0, 0), 3.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreached_nodes_collect_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(2.0));
        let y = t.leaf(Mat::scalar(5.0));
        let out = t.mul(x, x);
        let out = t.sum_all(out);
        let grads = t.backward(out);
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get(x).unwrap().at(0, 0), 4.0);
    }
}
