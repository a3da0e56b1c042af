//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node to the [`Graph`]. Node
//! inputs always precede their outputs, so walking the tape backwards is a
//! reverse topological order and `backward` needs no sorting.

use crate::error::{Result, TensorError};
use crate::tensor::{set_sum, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    SetMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor<T>,
        inv_std: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation tape. Build a forward pass with the op methods, then call
/// [`Graph::backward`] on a `1 x 1` result.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Dimension {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Matrix product with an order-independent inner reduction. Use when the
    /// inner axis is a set (attention keys) and exact permutation
    /// equivariance matters.
    pub fn set_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).set_matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::SetMatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(self.dim_err("add_row", a, row));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let data = (0..m * n).map(|i| av[i] + rv[i % n]).collect();
        let value = Tensor::new([m, n], data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Softmax along each row, stabilized by subtracting the row maximum.
    /// The normalizer is an order-independent sum.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [m, n] = x.shape();
        let mut data = Vec::with_capacity(m * n);
        let mut exps = vec![T::zero(); n];
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            for (e, &v) in exps.iter_mut().zip(row) {
                *e = (v - max).exp();
            }
            let mut scratch = exps.clone();
            let total = set_sum(&mut scratch);
            data.extend(exps.iter().map(|&e| e / total));
        }
        let value = Tensor::new([m, n], data).expect("shape preserved");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Per-row layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(gain) != [1, n] {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [1, n] {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                normed.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let value = Tensor::new([m, n], out)?;
        let normed = Tensor::new([m, n], normed)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm. All-zero rows pass through
    /// unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [m, n] = xv.shape();
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = xv.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(norm);
            if norm > T::zero() {
                data.extend(row.iter().map(|&v| v / norm));
            } else {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::new([m, n], data).expect("shape preserved");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_rows of nothing".into()))?;
        let n = self.shape(first)[1];
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            if self.shape(p)[1] != n {
                return Err(self.dim_err("concat_rows", first, p));
            }
            data.extend_from_slice(self.value(p).data());
            m += self.shape(p)[0];
        }
        let value = Tensor::new([m, n], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_cols of nothing".into()))?;
        let m = self.shape(first)[0];
        for &p in parts {
            if self.shape(p)[0] != m {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new([m, n], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if len == 0 || start + len > n {
            return Err(TensorError::Usage(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new([m, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean squared error between equal-shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.dim_err("mse_loss", pred, target));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = T::from_usize(p.len()).unwrap();
        let total = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(pred, target), rg))
    }

    /// Runs reverse-mode differentiation from a `1 x 1` node, replacing any
    /// gradients from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(TensorError::Usage(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &upstream)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::SetMatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let da = g.matmul(&self.value(b).transpose())?;
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = self.value(a).transpose().matmul(g)?;
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.zip_with(self.value(b), "mul", |x, y| x * y)?;
                let db = g.zip_with(self.value(a), "mul", |x, y| x * y)?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddRow(a, row) => {
                let [m, n] = g.shape();
                let mut dr = vec![T::zero(); n];
                for r in 0..m {
                    for (d, &v) in dr.iter_mut().zip(g.row(r)) {
                        *d = *d + v;
                    }
                }
                self.accumulate(*a, g.clone());
                self.accumulate(*row, Tensor::new([1, n], dr)?);
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(*a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let da = g.zip_with(self.value(*a), "relu", |gv, x| {
                    if x > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(*a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = g.zip_with(y, "sigmoid", |gv, s| gv * s * (T::one() - s))?;
                self.accumulate(*a, da);
            }
            Op::Transpose(a) => {
                self.accumulate(*a, g.transpose());
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let [m, n] = y.shape();
                let mut da = Vec::with_capacity(m * n);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    da.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(*a, Tensor::new([m, n], da)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let [m, n] = normed.shape();
                let nf = T::from_usize(n).unwrap();
                let gv = self.value(*gain).data().to_vec();
                let mut dx = Vec::with_capacity(m * n);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dh = vec![T::zero(); n];
                for r in 0..m {
                    let gr = g.row(r);
                    let hr = normed.row(r);
                    for c in 0..n {
                        dh[c] = gr[c] * gv[c];
                        dgain[c] = dgain[c] + gr[c] * hr[c];
                        dbias[c] = dbias[c] + gr[c];
                    }
                    let mean_dh = dh.iter().copied().sum::<T>() / nf;
                    let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for c in 0..n {
                        dx.push(inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h));
                    }
                }
                self.accumulate(*x, Tensor::new([m, n], dx)?);
                self.accumulate(*gain, Tensor::new([1, n], dgain)?);
                self.accumulate(*bias, Tensor::new([1, n], dbias)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &self.nodes[idx].value;
                let [m, n] = y.shape();
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    if norms[r] > T::zero() {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norms[r]));
                    } else {
                        dx.extend_from_slice(gr);
                    }
                }
                self.accumulate(*x, Tensor::new([m, n], dx)?);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    let slice = g.data()[offset * n..(offset + rows) * n].to_vec();
                    offset += rows;
                    self.accumulate(p, Tensor::new([rows, n], slice)?);
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    let mut slice = Vec::with_capacity(m * cols);
                    for r in 0..m {
                        slice.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(p, Tensor::new([m, cols], slice)?);
                }
            }
            Op::SliceCols { x, start } => {
                let [m, n] = self.shape(*x);
                let len = g.cols();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(*x, Tensor::new([m, n], dx)?);
            }
            Op::Sum(x) => {
                let s = g.get(0, 0);
                let shape = self.shape(*x);
                self.accumulate(*x, Tensor::full(shape, s)?);
            }
            Op::Mse(p, t) => {
                let (p, t) = (*p, *t);
                let pv = self.value(p);
                let n = T::from_usize(pv.len()).unwrap();
                let two = T::one() + T::one();
                let s = g.get(0, 0);
                let dp = pv.zip_with(self.value(t), "mse_loss", |a, b| two * (a - b) / n * s)?;
                let dt = dp.map(|v| -v);
                self.accumulate(p, dp);
                self.accumulate(t, dt);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
