//! Reverse-mode differentiation over batched matrix operations.
//!
//! Every forward op appends a node holding its value and the recipe for its
//! vector-Jacobian product. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients additively, so a parameter bound once and reused
//! across timesteps receives the sum of its per-step contributions.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, layer_norm_row, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Zero-valued tensors matching every parameter shape.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    LogSumExpRows(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    /// Records every parameter once; index the result with `ParamId.0`.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Vec<Var> {
        params.ids().map(|id| self.param(params, id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, av.data(), bv.data(), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a (m x k) * b^T` with `b` stored as `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt {:?} x {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, av.data(), bv.data(), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a (m x n) + bias (n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// `x * w + b`, the affine layer used throughout the models.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(Error::Dimension(format!(
                "mul_const: {:?} vs {:?}",
                av.shape(),
                c.shape()
            )));
        }
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Layer normalization of every row (no learned gain or bias).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() < 2 {
            return Err(Error::Dimension(format!(
                "layer_norm needs at least 2 features, got {:?}",
                av.shape()
            )));
        }
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            inv_std.push(layer_norm_row(av.row(r), out.row_mut(r)));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::LayerNorm(a, inv_std), ng))
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|^2 + eps^2)`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let sq: T = row.iter().map(|&v| v * v).sum();
            let norm = (sq + eps * eps).sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize(a, norms), ng)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len().max(1));
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `sum(a * w)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        let p = self.mul_const(a, w)?;
        Ok(self.sum_all(p))
    }

    /// Numerically stable `log(sum_j exp(a_ij))` per row; returns an `m`-vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<T> = (0..av.rows()).map(|r| logsumexp(av.row(r))).collect();
        let ng = self.ng(a);
        self.push(Tensor::vector(out), Op::LogSumExpRows(a), ng)
    }

    /// Gradients of the single-element node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {}",
                lv.data()[0]
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), bv.data(), &mut da, false);
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, av.data(), g.data(), &mut db, false);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g.data(), bv.data(), &mut da, false);
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(n, m, k, g.data(), av.data(), &mut db, false);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let back = g.transpose();
                let shape = self.value(*a).shape().to_vec();
                acc(*a, back.reshape(shape).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, reshaped(g, self.value(*a)));
                acc(*b, reshaped(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reshaped(g, self.value(*a)));
                acc(*b, reshaped(&g.map(|x| -x), self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, hadamard(g, bv, av.shape()));
                }
                if self.ng(*b) {
                    acc(*b, hadamard(g, av, bv.shape()));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    let bv = self.value(*bias);
                    let mut db = vec![T::zero(); bv.len()];
                    for r in 0..g.rows() {
                        for (d, &x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*bias, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::MulConst(a, c) => acc(*a, hadamard(g, c, self.value(*a).shape())),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                acc(*a, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &t)| d * (T::one() - t * t))
                    .collect();
                acc(*a, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::lit(2.0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| two * v * d)
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = T::from_usize_lossy(y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let mean_g = gy.iter().copied().sum::<T>() / n;
                    let mean_gy = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let s = inv_std[r];
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *d = s * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*a, dx);
            }
            Op::L2Normalize(a, norms) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let dot = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *d = (gi - yi * dot) / norms[r];
                    }
                }
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let len = g.cols();
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut dp = Tensor::zeros(pv.shape());
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(p, dp);
                }
            }
            Op::SumAll(a) => {
                let d = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let lse = node.value.data()[r];
                    let gr = g.data()[r];
                    for (d, &x) in dx.row_mut(r).iter_mut().zip(av.row(r)) {
                        *d = gr * (x - lse).exp();
                    }
                }
                acc(*a, dx);
            }
        }
    }

    /// Sums node gradients into one tensor per parameter. Parameters that
    /// were never bound, or bound but unused, get exact zeros.
    pub fn param_grads(&self, grads: &Gradients<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        let mut out = params.zeros_like();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    out[id.0].add_assign(g);
                }
            }
        }
        out
    }
}

fn reshaped<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        g.clone().reshape(like.shape().to_vec()).expect("same length")
    }
}

fn hadamard<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("same length")
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
