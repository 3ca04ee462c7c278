//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation computes its value eagerly and
//! records what it needs for the backward pass. Nodes are appended in
//! topological order, so a single reverse sweep from a scalar loss node
//! yields exact analytic gradients for every named parameter leaf.
//!
//! The operator set is exactly what the coupling/decoupling networks,
//! classifier heads, and loss terms require; this is not a general
//! autodiff library.

use std::collections::BTreeMap;

use crate::tensor::{self, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
        grad_scale: T,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    AddScalar {
        x: NodeId,
    },
    MulConst {
        x: NodeId,
        c: Mat<T>,
    },
    ClampMin {
        x: NodeId,
        c: T,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    NarrowRows {
        x: NodeId,
        start: usize,
    },
    RepeatRowsInterleave {
        x: NodeId,
        times: usize,
    },
    Reshape {
        x: NodeId,
    },
    RowL2 {
        x: NodeId,
    },
    RowL1 {
        x: NodeId,
    },
    RowDot {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Mat<T>,
    },
    Sum {
        x: NodeId,
    },
    MeanWeighted {
        x: NodeId,
        w: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    name: Option<String>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, name: Option<String>) -> NodeId {
        self.nodes.push(Node { value, op, name });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!((v.rows(), v.cols()), (1, 1), "not a scalar node");
        v.at(0, 0)
    }

    pub fn grad(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    /// Constant leaf; gradients still accumulate but nobody reads them.
    pub fn leaf(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, Some(name.to_string()))
    }

    pub fn scalar_leaf(&mut self, v: T) -> NodeId {
        self.leaf(Mat::from_vec(1, 1, vec![v]))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = tensor::affine(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Affine { x, w, b }, None)
    }

    /// Train-mode batch normalization over rows using this call's batch
    /// statistics. Returns the output node plus the batch mean/variance so
    /// the caller can maintain running statistics.
    pub fn bn_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> (NodeId, Vec<T>, Vec<T>) {
        let xv = self.value(x);
        assert!(xv.rows() >= 2, "train-mode batchnorm needs >= 2 rows");
        let (mean, var) = tensor::batch_mean_var(xv);
        let (y, xhat, inv_std) =
            tensor::bn_apply(xv, &mean, &var, self.value(gamma), self.value(beta), eps);
        let id = self.push(
            y,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            None,
        );
        (id, mean, var)
    }

    /// Eval-mode batch normalization with frozen running statistics.
    pub fn bn_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> NodeId {
        let (y, xhat, inv_std) = tensor::bn_apply(
            self.value(x),
            running_mean,
            running_var,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        self.push(
            y,
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            None,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu { x }, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = tensor::sigmoid(self.value(x));
        self.push(
            y,
            Op::Sigmoid {
                x,
                grad_scale: T::one(),
            },
            None,
        )
    }

    /// Sigmoid whose backward pass is deliberately scaled; exists so tests
    /// can prove the finite-difference check catches a wrong derivative.
    #[allow(dead_code)]
    pub(crate) fn sigmoid_corrupted(&mut self, x: NodeId, grad_scale: T) -> NodeId {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x, grad_scale }, None)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let y = tensor::softmax_rows(self.value(x));
        self.push(y, Op::SoftmaxRows { x }, None)
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, op: &str) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            (va.rows(), va.cols()),
            (vb.rows(), vb.cols()),
            "{op}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(y, Op::Add { a, b }, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let y = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(y, Op::Sub { a, b }, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(y, Op::Mul { a, b }, None)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "div");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let y = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(y, Op::Div { a, b }, None)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale { x, c }, None)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar { x }, None)
    }

    /// Hadamard product with a constant (non-differentiated) matrix.
    pub fn mul_const(&mut self, x: NodeId, c: Mat<T>) -> NodeId {
        let v = self.value(x);
        assert_eq!(
            (v.rows(), v.cols()),
            (c.rows(), c.cols()),
            "mul_const shape"
        );
        let data = v
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let y = Mat::from_vec(v.rows(), v.cols(), data);
        self.push(y, Op::MulConst { x, c }, None)
    }

    pub fn clamp_min(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v.max(c));
        self.push(y, Op::ClampMin { x, c }, None)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let mut y = Mat::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            y.row_mut(r)[..va.cols()].copy_from_slice(va.row(r));
            y.row_mut(r)[va.cols()..].copy_from_slice(vb.row(r));
        }
        self.push(y, Op::ConcatCols { a, b }, None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Mat::vcat(&mats);
        self.push(
            y,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            None,
        )
    }

    pub fn narrow_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        assert!(start + len <= v.rows(), "narrow_rows out of range");
        let mut y = Mat::zeros(len, v.cols());
        for r in 0..len {
            y.row_mut(r).copy_from_slice(v.row(start + r));
        }
        self.push(y, Op::NarrowRows { x, start }, None)
    }

    /// Repeats each row `times` consecutive times.
    pub fn repeat_rows_interleave(&mut self, x: NodeId, times: usize) -> NodeId {
        let v = self.value(x);
        let mut y = Mat::zeros(v.rows() * times, v.cols());
        for r in 0..v.rows() {
            for t in 0..times {
                y.row_mut(r * times + t).copy_from_slice(v.row(r));
            }
        }
        self.push(y, Op::RepeatRowsInterleave { x, times }, None)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let y = self.value(x).reshaped(rows, cols);
        self.push(y, Op::Reshape { x }, None)
    }

    pub fn row_l2(&mut self, x: NodeId) -> NodeId {
        let y = tensor::row_l2(self.value(x));
        self.push(y, Op::RowL2 { x }, None)
    }

    pub fn row_l1(&mut self, x: NodeId) -> NodeId {
        let y = tensor::row_l1(self.value(x));
        self.push(y, Op::RowL1 { x }, None)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "row_dot");
        let y = tensor::row_dot(self.value(a), self.value(b));
        self.push(y, Op::RowDot { a, b }, None)
    }

    /// Per-row softmax cross-entropy against integer labels (R x 1).
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let (losses, probs) = tensor::softmax_cross_entropy(self.value(logits), &labels);
        self.push(
            losses,
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            },
            None,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().cloned().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum { x }, None)
    }

    /// Mean over all entries.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).data().len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Weighted sum over all entries with constant weights (same shape).
    pub fn mean_weighted(&mut self, x: NodeId, w: Mat<T>) -> NodeId {
        let v = self.value(x);
        assert_eq!(
            (v.rows(), v.cols()),
            (w.rows(), w.cols()),
            "mean_weighted shape"
        );
        let s: T = v.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        self.push(
            Mat::from_vec(1, 1, vec![s]),
            Op::MeanWeighted { x, w },
            None,
        )
    }

    fn accumulate(&mut self, id: NodeId, delta: Mat<T>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                debug_assert_eq!((g.rows(), g.cols()), (delta.rows(), delta.cols()));
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar node. Gradients of all reachable nodes
    /// are accumulated and retrievable via [`Graph::grad`].
    pub fn backward(&mut self, from: NodeId) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        {
            let v = self.value(from);
            assert_eq!((v.rows(), v.cols()), (1, 1), "backward needs a scalar node");
        }
        self.grads[from.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = self.grads[i].clone() else {
                continue;
            };
            // Ops are matched by value to keep the borrow checker out of the
            // way; saved contexts are cloned where needed.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (dx, dw, db) = tensor::affine_backward(self.value(x), self.value(w), &dy);
                    self.accumulate(x, dx);
                    self.accumulate(w, dw);
                    self.accumulate(b, db);
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let rows = xhat.rows();
                    let cols = xhat.cols();
                    let gvec = self.value(gamma).data().to_vec();
                    let nb = T::lit(rows as f64);

                    let mut dgamma = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut sum_dxhat = vec![T::zero(); cols];
                    let mut sum_dxhat_xhat = vec![T::zero(); cols];
                    let mut dxhat = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = dy.at(r, c);
                            dgamma.data_mut()[c] += g * xhat.at(r, c);
                            dbeta.data_mut()[c] += g;
                            let dh = g * gvec[c];
                            dxhat.set(r, c, dh);
                            sum_dxhat[c] += dh;
                            sum_dxhat_xhat[c] += dh * xhat.at(r, c);
                        }
                    }
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = inv_std[c] / nb
                                * (nb * dxhat.at(r, c)
                                    - sum_dxhat[c]
                                    - xhat.at(r, c) * sum_dxhat_xhat[c]);
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let rows = xhat.rows();
                    let cols = xhat.cols();
                    let gvec = self.value(gamma).data().to_vec();
                    let mut dgamma = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = dy.at(r, c);
                            dgamma.data_mut()[c] += g * xhat.at(r, c);
                            dbeta.data_mut()[c] += g;
                            dx.set(r, c, g * gvec[c] * inv_std[c]);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = self.value(x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    let dx = Mat::from_vec(xv.rows(), xv.cols(), data);
                    self.accumulate(x, dx);
                }
                Op::Sigmoid { x, grad_scale } => {
                    let (x, gs) = (*x, *grad_scale);
                    let yv = &self.nodes[i].value;
                    let data = yv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&s, &g)| g * s * (T::one() - s) * gs)
                        .collect();
                    let dx = Mat::from_vec(yv.rows(), yv.cols(), data);
                    self.accumulate(x, dx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let yv = self.nodes[i].value.clone();
                    let mut dx = Mat::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let s = yv.row(r);
                        let gr = dy.row(r);
                        let dot: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..yv.cols() {
                            dx.set(r, c, s[c] * (gr[c] - dot));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, dy.clone());
                    self.accumulate(b, dy);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, dy.clone());
                    self.accumulate(b, dy.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let da = Mat::from_vec(
                        av.rows(),
                        av.cols(),
                        dy.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    );
                    let db = Mat::from_vec(
                        av.rows(),
                        av.cols(),
                        dy.data()
                            .iter()
                            .zip(av.data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    );
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Div { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let da = Mat::from_vec(
                        av.rows(),
                        av.cols(),
                        dy.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&g, &v)| g / v)
                            .collect(),
                    );
                    let db_data = dy
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    let db = Mat::from_vec(av.rows(), av.cols(), db_data);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    self.accumulate(x, dy.map(|v| v * c));
                }
                Op::AddScalar { x, .. } => {
                    let x = *x;
                    self.accumulate(x, dy);
                }
                Op::MulConst { x, c } => {
                    let x = *x;
                    let c = c.clone();
                    let dx = Mat::from_vec(
                        c.rows(),
                        c.cols(),
                        dy.data()
                            .iter()
                            .zip(c.data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    );
                    self.accumulate(x, dx);
                }
                Op::ClampMin { x, c } => {
                    let (x, c) = (*x, *c);
                    let xv = self.value(x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > c { g } else { T::zero() })
                        .collect();
                    let dx = Mat::from_vec(xv.rows(), xv.cols(), data);
                    self.accumulate(x, dx);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.value(a).cols();
                    let rows = dy.rows();
                    let cb = dy.cols() - ca;
                    let mut da = Mat::zeros(rows, ca);
                    let mut db = Mat::zeros(rows, cb);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&dy.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&dy.row(r)[ca..]);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut start = 0usize;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let cols = self.value(p).cols();
                        let mut dp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(dy.row(start + r));
                        }
                        start += rows;
                        self.accumulate(p, dp);
                    }
                }
                Op::NarrowRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let xv = self.value(x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(start + r).copy_from_slice(dy.row(r));
                    }
                    self.accumulate(x, dx);
                }
                Op::RepeatRowsInterleave { x, times } => {
                    let (x, times) = (*x, *times);
                    let xv = self.value(x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for t in 0..times {
                            let src = dy.row(r * times + t);
                            for (c, dvc) in dx.row_mut(r).iter_mut().enumerate() {
                                *dvc += src[c];
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let xv = self.value(x);
                    let dx = dy.reshaped(xv.rows(), xv.cols());
                    self.accumulate(x, dx);
                }
                Op::RowL2 { x } => {
                    let x = *x;
                    let xv = self.value(x).clone();
                    let norms = self.nodes[i].value.clone();
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let nrm = norms.at(r, 0);
                        if nrm > T::zero() {
                            let g = dy.at(r, 0) / nrm;
                            for (c, dvc) in dx.row_mut(r).iter_mut().enumerate() {
                                *dvc = g * xv.at(r, c);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::RowL1 { x } => {
                    let x = *x;
                    let xv = self.value(x).clone();
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let g = dy.at(r, 0);
                        for (c, dvc) in dx.row_mut(r).iter_mut().enumerate() {
                            let v = xv.at(r, c);
                            *dvc = if v > T::zero() {
                                g
                            } else if v < T::zero() {
                                -g
                            } else {
                                T::zero()
                            };
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::RowDot { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    let mut db = Mat::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let g = dy.at(r, 0);
                        for c in 0..av.cols() {
                            da.set(r, c, g * bv.at(r, c));
                            db.set(r, c, g * av.at(r, c));
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let mut dl = Mat::zeros(probs.rows(), probs.cols());
                    for (r, &label) in labels.iter().enumerate() {
                        let g = dy.at(r, 0);
                        for c in 0..probs.cols() {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            dl.set(r, c, g * (probs.at(r, c) - onehot));
                        }
                    }
                    self.accumulate(logits, dl);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let xv = self.value(x);
                    let g = dy.at(0, 0);
                    let dx = Mat::filled(xv.rows(), xv.cols(), g);
                    self.accumulate(x, dx);
                }
                Op::MeanWeighted { x, w } => {
                    let x = *x;
                    let w = w.clone();
                    let g = dy.at(0, 0);
                    let dx = w.map(|v| v * g);
                    self.accumulate(x, dx);
                }
            }
        }
    }

    /// Gradients of every named parameter leaf, keyed by name. Parameters
    /// the loss never touched get a zero gradient of matching shape.
    pub fn named_grads(&self) -> BTreeMap<String, Mat<T>> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = match &self.grads[i] {
                    Some(g) => g.clone(),
                    None => Mat::zeros(node.value.rows(), node.value.cols()),
                };
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of a scalar function of one matrix entry.
    fn central_diff<F: Fn(&Mat<f64>) -> f64>(f: F, m: &Mat<f64>, idx: usize, h: f64) -> f64 {
        let mut plus = m.clone();
        plus.data_mut()[idx] += h;
        let mut minus = m.clone();
        minus.data_mut()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn half_squared_norm_gradient_by_hand() {
        // loss = 0.5 * ||W x||^2 at W = I2, x = [1, 0] -> dW = [[1,0],[0,0]]
        let mut g = Graph::new();
        let w = g.param("w", Mat::identity(2));
        let b = g.leaf(Mat::zeros(1, 2));
        let x = g.leaf(Mat::row_vec(&[1.0f64, 0.0]));
        let y = g.affine(x, w, b);
        let y2 = g.mul(y, y);
        let s = g.sum(y2);
        let loss = g.scale(s, 0.5);
        g.backward(loss);
        let dw = g.grad(w).unwrap();
        assert_eq!(dw.row(0), &[1.0, 0.0]);
        assert_eq!(dw.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param("used", Mat::row_vec(&[2.0f64]));
        let _unused = g.param("unused", Mat::row_vec(&[5.0f64]));
        let sq = g.mul(used, used);
        let loss = g.sum(sq);
        g.backward(loss);
        let grads = g.named_grads();
        assert_eq!(grads["used"].at(0, 0), 4.0);
        assert_eq!(grads["unused"].at(0, 0), 0.0);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // A small net exercising affine, train-mode batchnorm, relu,
        // sigmoid, concat, row norms, softmax CE, and the hinge.
        let w1 = Mat::from_rows(&[vec![0.3f64, -0.2, 0.5], vec![0.1, 0.4, -0.6]]);
        let eval = |w1v: &Mat<f64>| -> f64 {
            let mut g = Graph::new();
            let w1n = g.param("w1", w1v.clone());
            let b1 = g.leaf(Mat::row_vec(&[0.05, -0.1]));
            let gamma = g.param("gamma", Mat::row_vec(&[1.1, 0.9]));
            let beta = g.leaf(Mat::row_vec(&[0.02, -0.03]));
            let x = g.leaf(Mat::from_rows(&[
                vec![0.5, -1.0, 0.25],
                vec![1.5, 0.75, -0.5],
                vec![-0.25, 0.1, 0.9],
            ]));
            let a = g.affine(x, w1n, b1);
            let (bn, _, _) = g.bn_train(a, gamma, beta, 1e-5);
            let r = g.relu(bn);
            let s = g.sigmoid(r);
            let cat = g.concat_cols(r, s);
            let n2 = g.row_l2(cat);
            let ce = g.softmax_ce(a, vec![0, 1, 0]);
            let hinge_in = g.add_scalar(n2, -0.8);
            let hinge = g.clamp_min(hinge_in, 0.0);
            let t1 = g.sum(hinge);
            let t2 = g.mean(ce);
            let loss = g.add(t1, t2);
            g.scalar(loss)
        };

        // analytic
        let mut g = Graph::new();
        let w1n = g.param("w1", w1.clone());
        let b1 = g.leaf(Mat::row_vec(&[0.05, -0.1]));
        let gamma = g.param("gamma", Mat::row_vec(&[1.1, 0.9]));
        let beta = g.leaf(Mat::row_vec(&[0.02, -0.03]));
        let x = g.leaf(Mat::from_rows(&[
            vec![0.5, -1.0, 0.25],
            vec![1.5, 0.75, -0.5],
            vec![-0.25, 0.1, 0.9],
        ]));
        let a = g.affine(x, w1n, b1);
        let (bn, _, _) = g.bn_train(a, gamma, beta, 1e-5);
        let r = g.relu(bn);
        let s = g.sigmoid(r);
        let cat = g.concat_cols(r, s);
        let n2 = g.row_l2(cat);
        let ce = g.softmax_ce(a, vec![0, 1, 0]);
        let hinge_in = g.add_scalar(n2, -0.8);
        let hinge = g.clamp_min(hinge_in, 0.0);
        let t1 = g.sum(hinge);
        let t2 = g.mean(ce);
        let loss = g.add(t1, t2);
        g.backward(loss);
        let dw = g.grad(w1n).unwrap().clone();

        for idx in 0..w1.data().len() {
            let num = central_diff(|m| eval(m), &w1, idx, 1e-6);
            let ana = dw.data()[idx];
            let rel = (ana - num).abs() / num.abs().max(1.0);
            assert!(rel < 1e-6, "idx {idx}: analytic {ana} vs numeric {num}");
        }
    }

    #[test]
    fn corrupted_sigmoid_derivative_is_detected() {
        let x0 = Mat::row_vec(&[0.3f64, -0.7]);
        let eval = |xv: &Mat<f64>, corrupt: bool| -> (f64, f64) {
            let mut g = Graph::new();
            let x = g.param("x", xv.clone());
            let s = if corrupt {
                g.sigmoid_corrupted(x, 1.01)
            } else {
                g.sigmoid(x)
            };
            let sq = g.mul(s, s);
            let loss = g.sum(sq);
            g.backward(loss);
            (g.scalar(loss), g.grad(x).unwrap().at(0, 0))
        };
        let (_, ana_bad) = eval(&x0, true);
        let num = central_diff(|m| eval(m, true).0, &x0, 0, 1e-6);
        let rel = (ana_bad - num).abs() / num.abs().max(1.0);
        assert!(rel > 1e-4, "corruption must be visible: rel {rel}");
        let (_, ana_good) = eval(&x0, false);
        let rel_good = (ana_good - num).abs() / num.abs().max(1.0);
        assert!(rel_good < 1e-6);
    }
}
