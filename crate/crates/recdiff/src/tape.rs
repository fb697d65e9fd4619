//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Operations execute eagerly and record themselves on a [`Tape`]; a single
//! [`Tape::backward`] pass then populates exact gradients for every recorded
//! node. Scalars are 1x1 tensors and vectors are nx1 tensors, so one storage
//! type covers the whole model. A tape is single-threaded by construction;
//! inputs always precede the operations consuming them.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Multiply row i by coeffs[i].
    RowScale(usize, Vec<f64>),
    /// Broadcast-add a 1xN bias node over all rows.
    AddRowBias(usize, usize),
    ConcatCols(usize, usize),
    /// Select rows by index; backward scatter-adds.
    GatherRows(usize, Vec<usize>),
    /// Multiply by a symmetric normalized adjacency.
    Spmv(usize, Arc<SparseGraph>),
    LeakyRelu(usize, f64),
    Softplus(usize),
    /// Per-row l2 normalization y_i = x_i / max(||x_i||, eps).
    L2NormRows(usize, f64),
    /// Row sums: MxN -> Mx1.
    RowSum(usize),
    /// Squared l2 norm per row: MxN -> Mx1.
    RowSqNorm(usize),
    /// Sum of all entries -> 1x1.
    Sum(usize),
    /// Mean of all entries -> 1x1.
    Mean(usize),
    /// Squared Frobenius norm -> 1x1.
    SqNorm(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// Gradient of the last backward target with respect to this node, if
    /// the node was reached.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(Array2::from_elem((1, 1), value), Op::Constant)
    }

    /// Record a trainable leaf; its gradient flows back into the store via
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn shapes(&self, a: Var, b: Var) -> ((usize, usize), (usize, usize)) {
        (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim())
    }

    fn same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(Error::Shape { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = self.shapes(a, b);
        if sa.1 != sb.0 {
            return Err(Error::Shape { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn row_scale(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let n = self.nodes[a.0].value.nrows();
        if coeffs.len() != n {
            return Err(Error::Shape {
                op: "row_scale",
                detail: format!("{n} rows vs {} coefficients", coeffs.len()),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            row *= coeffs[i];
        }
        Ok(self.push(value, Op::RowScale(a.0, coeffs)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = self.shapes(x, bias);
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(Error::Shape {
                op: "add_row_bias",
                detail: format!("{sx:?} plus bias {sb:?}"),
            });
        }
        let value = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        Ok(self.push(value, Op::AddRowBias(x.0, bias.0)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = self.shapes(a, b);
        if sa.0 != sb.0 {
            return Err(Error::Shape { op: "concat_cols", detail: format!("{sa:?} | {sb:?}") });
        }
        let mut value = Array2::zeros((sa.0, sa.1 + sb.1));
        value
            .slice_mut(ndarray::s![.., ..sa.1])
            .assign(&self.nodes[a.0].value);
        value
            .slice_mut(ndarray::s![.., sa.1..])
            .assign(&self.nodes[b.0].value);
        Ok(self.push(value, Op::ConcatCols(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.nodes[x.0].value.dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of {n}"),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut value = Array2::zeros((idx.len(), d));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        Ok(self.push(value, Op::GatherRows(x.0, idx.to_vec())))
    }

    pub fn spmv(&mut self, graph: &Arc<SparseGraph>, x: Var) -> Result<Var> {
        let value = graph.spmv(&self.nodes[x.0].value)?;
        Ok(self.push(value, Op::Spmv(x.0, Arc::clone(graph))))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x.0, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(softplus);
        self.push(value, Op::Softplus(x.0))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row /= n;
        }
        self.push(value, Op::L2NormRows(x.0, eps))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let sums = self.nodes[x.0].value.sum_axis(Axis(1));
        let n = sums.len();
        let value = sums.into_shape_with_order((n, 1)).expect("row_sum reshape");
        self.push(value, Op::RowSum(x.0))
    }

    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Array2::from_shape_fn((src.nrows(), 1), |(i, _)| {
            src.row(i).iter().map(|v| v * v).sum::<f64>()
        });
        self.push(value, Op::RowSqNorm(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x.0))
    }

    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|v| v * v).sum::<f64>();
        self.push(Array2::from_elem((1, 1), s), Op::SqNorm(x.0))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// that contributes to the loss; unreached nodes report no gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn accum(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
            match slot {
                Some(g) => *g += &delta,
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=loss.0).rev() {
            let (pre, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(g);
                    accum(&mut pre[*a], da);
                    accum(&mut pre[*b], db);
                }
                Op::Add(a, b) => {
                    accum(&mut pre[*a], g.clone());
                    accum(&mut pre[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut pre[*a], g.clone());
                    accum(&mut pre[*b], -g.clone());
                }
                Op::Mul(a, b) => {
                    accum(&mut pre[*a], g * &self.nodes[*b].value);
                    accum(&mut pre[*b], g * &self.nodes[*a].value);
                }
                Op::Scale(a, c) => accum(&mut pre[*a], g * *c),
                Op::RowScale(a, coeffs) => {
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        row *= coeffs[i];
                    }
                    accum(&mut pre[*a], d);
                }
                Op::AddRowBias(x, b) => {
                    accum(&mut pre[*x], g.clone());
                    let col = g.sum_axis(Axis(0));
                    let w = col.len();
                    accum(
                        &mut pre[*b],
                        col.into_shape_with_order((1, w)).expect("bias grad reshape"),
                    );
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[*a].value.ncols();
                    accum(&mut pre[*a], g.slice(ndarray::s![.., ..na]).to_owned());
                    accum(&mut pre[*b], g.slice(ndarray::s![.., na..]).to_owned());
                }
                Op::GatherRows(x, idx_list) => {
                    let dim = self.nodes[*x].value.raw_dim();
                    let mut d = Array2::zeros(dim);
                    for (k, &i) in idx_list.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(k);
                    }
                    accum(&mut pre[*x], d);
                }
                Op::Spmv(x, graph) => {
                    // The operator is symmetric, so the adjoint is itself.
                    let d = graph.spmv(g).expect("spmv backward shape");
                    accum(&mut pre[*x], d);
                }
                Op::LeakyRelu(x, slope) => {
                    let src = &self.nodes[*x].value;
                    let mut d = g.clone();
                    d.zip_mut_with(src, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    accum(&mut pre[*x], d);
                }
                Op::Softplus(x) => {
                    let src = &self.nodes[*x].value;
                    let mut d = g.clone();
                    d.zip_mut_with(src, |gv, &xv| *gv *= sigmoid(xv));
                    accum(&mut pre[*x], d);
                }
                Op::L2NormRows(x, eps) => {
                    let src = &self.nodes[*x].value;
                    let y = &node.value;
                    let mut d = Array2::zeros(src.raw_dim());
                    for i in 0..src.nrows() {
                        let n = src.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > *eps {
                            // d = (g - y (y.g)) / n  per row
                            let dot: f64 =
                                y.row(i).iter().zip(g.row(i).iter()).map(|(a, b)| a * b).sum();
                            for c in 0..src.ncols() {
                                d[[i, c]] = (g[[i, c]] - y[[i, c]] * dot) / n;
                            }
                        } else {
                            for c in 0..src.ncols() {
                                d[[i, c]] = g[[i, c]] / eps;
                            }
                        }
                    }
                    accum(&mut pre[*x], d);
                }
                Op::RowSum(x) => {
                    let (n, w) = self.nodes[*x].value.dim();
                    let d = Array2::from_shape_fn((n, w), |(i, _)| g[[i, 0]]);
                    accum(&mut pre[*x], d);
                }
                Op::RowSqNorm(x) => {
                    let src = &self.nodes[*x].value;
                    let d = Array2::from_shape_fn(src.raw_dim(), |(i, c)| {
                        2.0 * g[[i, 0]] * src[[i, c]]
                    });
                    accum(&mut pre[*x], d);
                }
                Op::Sum(x) => {
                    let d = Array2::from_elem(self.nodes[*x].value.raw_dim(), g[[0, 0]]);
                    accum(&mut pre[*x], d);
                }
                Op::Mean(x) => {
                    let len = self.nodes[*x].value.len() as f64;
                    let d = Array2::from_elem(self.nodes[*x].value.raw_dim(), g[[0, 0]] / len);
                    accum(&mut pre[*x], d);
                }
                Op::SqNorm(x) => {
                    let d = &self.nodes[*x].value * (2.0 * g[[0, 0]]);
                    accum(&mut pre[*x], d);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Add every reached parameter leaf's gradient into the store buffers.
    /// Leaves the store untouched for parameters the loss never reached.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(idx) {
                    *store.grad_mut(id) += g;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SocialMatrix;
    use ndarray::arr2;
    use rand::Rng;

    #[test]
    fn add_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.constant(arr2(&[[1.0, 2.0]]));
        let b = t.constant(arr2(&[[3.0, 4.0]]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &arr2(&[[4.0, 6.0]]));
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &arr2(&[[1.0, 1.0]]));
        assert_eq!(t.grad(b).unwrap(), &arr2(&[[1.0, 1.0]]));
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut t = Tape::new();
        let eye = t.constant(Array2::eye(3));
        let x = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Array2::from_elem((3, 2), 1.0));
    }

    #[test]
    fn sum_loss_grad_is_ones() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0], [2.0], [3.0]]));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Array2::from_elem((3, 1), 1.0));
    }

    #[test]
    fn sq_norm_grad_is_two_x() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0, -2.0, 3.0]]));
        let loss = t.sq_norm(x);
        assert_eq!(t.scalar(loss), 14.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &arr2(&[[2.0, -4.0, 6.0]]));
    }

    #[test]
    fn normalize_345_row() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[3.0, 4.0]]));
        let y = t.l2_normalize_rows(x, 1e-12);
        assert_eq!(t.value(y), &arr2(&[[0.6, 0.8]]));
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[0.0, 0.0]]));
        let y = t.l2_normalize_rows(x, 1e-12);
        assert_eq!(t.value(y), &arr2(&[[0.0, 0.0]]));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0, 2.0]]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_has_no_grad() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0]]));
        let y = t.constant(arr2(&[[2.0]]));
        let loss = t.sq_norm(x);
        t.backward(loss).unwrap();
        assert!(t.grad(y).is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((3, 2)));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
    }

    /// Central finite differences on an arbitrary scalar-valued builder.
    /// The builder must be a pure function of the input matrix.
    fn finite_diff_check(
        input: &Array2<f64>,
        build: impl Fn(&mut Tape, Var) -> Var,
        tol: f64,
    ) {
        let h = 1e-5;
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let loss = build(&mut t, x);
        t.backward(loss).unwrap();
        let analytic = t.grad(x).unwrap().clone();

        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let mut plus = input.clone();
                plus[[i, j]] += h;
                let mut minus = input.clone();
                minus[[i, j]] -= h;
                let mut tp = Tape::new();
                let xp = tp.constant(plus);
                let lp_var = build(&mut tp, xp);
                let lp = tp.scalar(lp_var);
                let mut tm = Tape::new();
                let xm = tm.constant(minus);
                let lm_var = build(&mut tm, xm);
                let lm = tm.scalar(lm_var);
                let numeric = (lp - lm) / (2.0 * h);
                let denom = numeric.abs().max(analytic[[i, j]].abs()).max(1e-8);
                assert!(
                    (numeric - analytic[[i, j]]).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): analytic {} vs numeric {}",
                    analytic[[i, j]],
                    numeric
                );
            }
        }
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(3, "tape-matmul");
        let a = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        let b = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() - 0.5);
        finite_diff_check(
            &a,
            |t, x| {
                let bc = t.constant(b.clone());
                let y = t.matmul(x, bc).unwrap();
                t.sq_norm(y)
            },
            1e-6,
        );
    }

    #[test]
    fn normalize_grad_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(5, "tape-norm");
        let x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
        finite_diff_check(
            &x,
            |t, x| {
                let y = t.l2_normalize_rows(x, 1e-12);
                let w = t.constant(Array2::from_shape_fn((5, 4), |(i, j)| {
                    ((i * 4 + j) as f64).sin()
                }));
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn leaky_relu_grad_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(7, "tape-lrelu");
        let x = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        finite_diff_check(
            &x,
            |t, x| {
                let y = t.leaky_relu(x, 0.2);
                t.sq_norm(y)
            },
            1e-6,
        );
    }

    #[test]
    fn composed_graph_grad_matches_finite_differences() {
        // matmul -> leaky_relu -> concat -> row ops -> softplus -> mean
        let mut rng = crate::rng::stream_rng(9, "tape-composed");
        let x = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let w = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        finite_diff_check(
            &x,
            |t, x| {
                let wc = t.constant(w.clone());
                let h = t.matmul(x, wc).unwrap();
                let a = t.leaky_relu(h, 0.2);
                let cat = t.concat_cols(a, x).unwrap();
                let rs = t.row_sum(cat);
                let sp = t.softplus(rs);
                t.mean(sp)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_grad() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let g = t.gather_rows(x, &[2, 0, 2]).unwrap();
        let loss = t.sum(g);
        t.backward(loss).unwrap();
        // Row 2 selected twice, row 1 never.
        assert_eq!(t.grad(x).unwrap(), &arr2(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]));
    }

    #[test]
    fn spmv_grad_matches_finite_differences() {
        let sm = SocialMatrix::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let g = Arc::new(crate::graph::build_social(&sm));
        let mut rng = crate::rng::stream_rng(21, "tape-spmv");
        let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
        finite_diff_check(
            &x,
            |t, x| {
                let y = t.spmv(&g, x).unwrap();
                t.sq_norm(y)
            },
            1e-6,
        );
    }

    #[test]
    fn tape_replay_grads_identical() {
        let mut rng = crate::rng::stream_rng(23, "tape-replay");
        let x = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let run = |input: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.constant(input.clone());
            let y = t.leaky_relu(v, 0.2);
            let n = t.l2_normalize_rows(y, 1e-12);
            let loss = t.sq_norm(n);
            t.backward(loss).unwrap();
            t.grad(v).unwrap().clone()
        };
        assert_eq!(run(&x), run(&x));
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", arr2(&[[2.0, -1.0]]));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let loss = t.sq_norm(w);
        t.backward(loss).unwrap();
        store.zero_grads();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &arr2(&[[4.0, -2.0]]));
    }
}
