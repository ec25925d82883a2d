//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! appended in evaluation order, so the reverse of insertion order is a valid
//! topological order for back-propagation. A node requires a gradient when it
//! is a leaf created with `requires_grad = true` or when any of its parents
//! does; gradients are only propagated along such nodes.
//!
//! ```
//! use ramp_core::autodiff::Graph;
//! use ramp_core::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let loss = g.sum(x);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, S),
    SelectRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of recorded operations plus gradient buffers from the last backward
/// pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Tensor<S>>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// True once `backward` has run and `reset` has not been called since.
    pub fn is_consumed(&self) -> bool {
        self.grads.is_some()
    }

    /// Drops gradient buffers so another backward pass may run.
    pub fn reset(&mut self) {
        self.grads = None;
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// Adds a bias vector of length `m` to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(dim_err(
                "add_bias",
                format!("bias of length {}", xv.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        let m = b.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += b[i % m];
        }
        Ok(self.binary(x, bias, out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.binary(a, b, value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.unary(a, value, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.unary(a, value, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::Softmax(a))
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.unary(a, value, Op::LogSoftmax(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.unary(a, value, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        self.unary(a, value, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: S) -> Var {
        let value = self.value(a).map(|x| if x < floor { floor } else { x });
        self.unary(a, value, Op::ClampMin(a, floor))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(dim_err("select_rows", format!("row < {}", av.rows()), bad));
        }
        let value = av.select_rows(rows);
        Ok(self.unary(a, value, Op::SelectRows(a, rows.to_vec())))
    }

    /// Picks `a[i, cols[i]]` for every row, producing a vector of length `n`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || cols.len() != av.rows() {
            return Err(dim_err("pick_per_row", av.rows(), cols.len()));
        }
        let k = av.cols();
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(dim_err("pick_per_row", format!("column < {k}"), bad));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| av.row(i)[c]).collect();
        let value = Tensor::vector(data);
        Ok(self.unary(a, value, Op::PickPerRow(a, cols.to_vec())))
    }

    /// Sums each row of an `n×k` matrix into a vector of length `n`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::vector(av.iter_rows().map(|r| r.iter().copied().sum()).collect());
        self.unary(a, value, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / S::of_usize(av.len()));
        self.unary(a, value, Op::Mean(a))
    }

    /// Back-propagates from a scalar `loss`, filling gradient buffers of every
    /// node that requires a gradient. Leaves that require a gradient but lie
    /// off the loss's path receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::GraphConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), S::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() && matches!(node.op, Op::Leaf) {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, idx: usize, d: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Tensor<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let bt = bv.transpose();
                    let mut out = vec![S::zero(); n * k];
                    matmul_into(d.data(), bt.data(), &mut out, n, m, k);
                    acc(*a, Tensor::new(av.shape().to_vec(), out).expect("shape"));
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let at = av.transpose();
                    let mut out = vec![S::zero(); k * m];
                    matmul_into(at.data(), d.data(), &mut out, k, n, m);
                    acc(*b, Tensor::new(bv.shape().to_vec(), out).expect("shape"));
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    acc(*x, d.clone());
                }
                if needs(*b) {
                    let m = val(*b).len();
                    let mut db = vec![S::zero(); m];
                    for (i, &g) in d.data().iter().enumerate() {
                        db[i % m] += g;
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, d.clone());
                acc(*b, d.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, d.clone());
                acc(*b, d.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, d.zip_map(val(*b), |g, y| g * y).expect("shape"));
                }
                if needs(*b) {
                    acc(*b, d.zip_map(val(*a), |g, x| g * x).expect("shape"));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, d.zip_map(bv, |g, y| g / y).expect("shape"));
                }
                if needs(*b) {
                    let data = d
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    acc(*b, Tensor::new(bv.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Scale(a, c) => acc(*a, d.map(|g| g * *c)),
            Op::AddScalar(a, _) => acc(*a, d.clone()),
            Op::Relu(a) => {
                acc(
                    *a,
                    d.zip_map(val(*a), |g, x| if x > S::zero() { g } else { S::zero() })
                        .expect("shape"),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = d.clone();
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), d.row(i));
                    let s: S = yr.iter().zip(dr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in out.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *o = p * (g - s);
                    }
                }
                acc(*a, out);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut out = d.clone();
                for i in 0..y.rows() {
                    let s: S = d.row(i).iter().copied().sum();
                    for (o, &ly) in out.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o -= ly.exp() * s;
                    }
                }
                acc(*a, out);
            }
            Op::Ln(a) => acc(*a, d.zip_map(val(*a), |g, x| g / x).expect("shape")),
            Op::Sqrt(a) => {
                acc(*a, d.zip_map(&node.value, |g, r| g / (S::of(2.0) * r)).expect("shape"));
            }
            Op::ClampMin(a, floor) => {
                acc(
                    *a,
                    d.zip_map(val(*a), |g, x| if x >= *floor { g } else { S::zero() })
                        .expect("shape"),
                );
            }
            Op::SelectRows(a, rows) => {
                let mut out = Tensor::zeros(val(*a).shape());
                for (j, &r) in rows.iter().enumerate() {
                    for (o, &g) in out.row_mut(r).iter_mut().zip(d.row(j)) {
                        *o += g;
                    }
                }
                acc(*a, out);
            }
            Op::PickPerRow(a, cols) => {
                let mut out = Tensor::zeros(val(*a).shape());
                for (i, &c) in cols.iter().enumerate() {
                    out.row_mut(i)[c] += d.data()[i];
                }
                acc(*a, out);
            }
            Op::RowSum(a) => {
                let mut out = Tensor::zeros(val(*a).shape());
                for i in 0..out.rows() {
                    let g = d.data()[i];
                    out.row_mut(i).iter_mut().for_each(|o| *o = g);
                }
                acc(*a, out);
            }
            Op::Sum(a) => acc(*a, Tensor::filled(val(*a).shape(), d.item())),
            Op::Mean(a) => {
                let av = val(*a);
                acc(*a, Tensor::filled(av.shape(), d.item() / S::of_usize(av.len())));
            }
        }
    }
}

/// Row-wise softmax of a matrix, computed with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}
