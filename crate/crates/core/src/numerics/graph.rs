//! Reverse-mode differentiation over a recorded list of dense operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are computed
//! eagerly as operations are recorded; [`Graph::backward`] walks the list in
//! reverse and returns a [`Gradients`] table holding `dLoss/dNode` for every
//! node that depends on a parameter or variable leaf.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CatRows(Vec<Var>),
    CatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Add parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.add_assign(g);
        }
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (not tied to the parameter store).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node, so
    /// a parameter used on several paths accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul_t", self.value(a))?;
        let (n, k2) = rank2("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        check_same(op_name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n,d] + row[d]`, broadcasting the row over every row of `a`.
    /// `row` may be shaped `[d]` or `[1, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = rank2("add_row", self.value(a))?;
        let rv = self.value(row);
        if rv.len() != d || rv.rank() > 2 || (rv.rank() == 2 && rv.shape()[0] != 1) {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = rv.data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += r[j];
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for o in &mut out[i * d..(i + 1) * d] {
                *o /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for j in 0..d {
                out[i * d + j] = row[j] - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmaxRows(a), rg))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length d.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scale each row to unit L2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut norms = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms[i] = nrm;
            for j in 0..d {
                out[i * d + j] = row[j] / nrm;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Mean of a rank-2 tensor along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, d) = rank2("mean_axis", self.value(x))?;
        if n == 0 || d == 0 {
            return Err(Error::shape("mean_axis", self.shape(x), &[axis]));
        }
        let src = self.value(x).data();
        let out = match axis {
            0 => {
                let mut out = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        out[j] += src[i * d + j];
                    }
                }
                let inv = T::one() / T::of(n as f64);
                out.iter_mut().for_each(|v| *v *= inv);
                Tensor::new(&[d], out)?
            }
            1 => {
                let inv = T::one() / T::of(d as f64);
                let out = (0..n)
                    .map(|i| src[i * d..(i + 1) * d].iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::new(&[n], out)?
            }
            _ => return Err(Error::shape("mean_axis", self.shape(x), &[axis])),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", self.shape(x), &[1]));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), rg))
    }

    /// Rows of `x` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = rank2("gather_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Internal(format!(
                    "gather_rows: index {i} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn cat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Internal("cat_rows of nothing".into()))?;
        let (_, d) = rank2("cat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rank2("cat_rows", self.value(p))?;
            if c != d {
                return Err(Error::shape("cat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, d], out)?, Op::CatRows(parts.to_vec()), rg))
    }

    pub fn cat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Internal("cat_cols of nothing".into()))?;
        let (n, _) = rank2("cat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("cat_cols", self.value(p))?;
            if r != n {
                return Err(Error::shape("cat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::CatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = rank2("slice_cols", self.value(x))?;
        if start + len > d {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Elements `x[r, c]` for each `(r, c)`, as a vector.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= n || c >= d {
                return Err(Error::Internal(format!(
                    "pick: ({r}, {c}) out of range for {n}x{d}"
                )));
            }
            out.push(self.value(x).data()[r * d + c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len()], out)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.value(a), self.value(b))?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mse", self.shape(a), &[1]));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(n as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Linear map `x·w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = rank2("matmul", av)?;
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(g, bv.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g, &mut gb, m, k, n);
                    self.acc(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::MatMulT(a, b) => {
                // y[m,n] = a[m,k] b[n,k]^T
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = rank2("matmul_t", av)?;
                let n = bv.shape()[0];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nn(g, bv.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm_tn(g, av.data(), &mut gb, m, n, k);
                    self.acc(grads, *b, Tensor::new(&[n, k], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rank2("transpose", y)?;
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                self.acc(grads, *a, Tensor::new(&[c, r], ga)?);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let d = g.iter().zip(bv.data()).map(|(&u, &w)| u * w).collect();
                    self.acc(grads, *a, Tensor::new(av.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(av.data()).map(|(&u, &w)| u * w).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape(), d)?);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gy.clone());
                if self.rg(*row) {
                    let (n, d) = rank2("add_row", y)?;
                    let mut gr = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            gr[j] += g[i * d + j];
                        }
                    }
                    self.acc(grads, *row, Tensor::new(self.shape(*row), gr)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, gy.map(|x| x * c));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&u, &v)| u * gelu_parts(v).1).collect();
                self.acc(grads, *a, Tensor::new(y.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(y.data())
                    .map(|(&u, &s)| u * s * (T::one() - s))
                    .collect();
                self.acc(grads, *a, Tensor::new(y.shape(), d)?);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&u, &v)| {
                        if v > T::zero() {
                            u
                        } else if v < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(y.shape(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let (n, d) = y.dims2()?;
                let s = y.data();
                let mut ga = vec![T::zero(); n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let dot: T = g[r.clone()].iter().zip(&s[r.clone()]).map(|(&u, &v)| u * v).sum();
                    for j in r {
                        ga[j] = s[j] * (g[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape(), ga)?);
            }
            Op::LogSoftmaxRows(a) => {
                let (n, d) = y.dims2()?;
                let ls = y.data();
                let mut ga = vec![T::zero(); n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let total: T = g[r.clone()].iter().copied().sum();
                    for j in r {
                        ga[j] = g[j] - ls[j].exp() * total;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape(), ga)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = y.dims2()?;
                let gm = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                            gb[j] += g[i * d + j];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(self.shape(*gamma), gg)?);
                    self.acc(grads, *beta, Tensor::new(self.shape(*beta), gb)?);
                }
                if self.rg(*x) {
                    let dn = T::of(d as f64);
                    let mut gx = vec![T::zero(); n * d];
                    for i in 0..n {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[i * d + j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dh = g[i * d + j] * gm[j];
                            gx[i * d + j] =
                                rstd[i] * (dh - sum_dh / dn - xhat[i * d + j] * sum_dh_h / dn);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(y.shape(), gx)?);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, d) = y.dims2()?;
                let yv = y.data();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let dot: T = g[r.clone()].iter().zip(&yv[r.clone()]).map(|(&u, &v)| u * v).sum();
                    for j in r {
                        gx[j] = (g[j] - yv[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), gx)?);
            }
            Op::MeanAxis { x, axis } => {
                let (n, d) = rank2("mean_axis", self.value(*x))?;
                let mut gx = vec![T::zero(); n * d];
                if *axis == 0 {
                    let inv = T::one() / T::of(n as f64);
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] = g[j] * inv;
                        }
                    }
                } else {
                    let inv = T::one() / T::of(d as f64);
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] = g[i] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[n, d], gx)?);
            }
            Op::SumAll(x) => {
                let s = self.value(*x);
                self.acc(grads, *x, Tensor::full(s.shape(), g[0]));
            }
            Op::MeanAll(x) => {
                let s = self.value(*x);
                let v = g[0] / T::of(s.len() as f64);
                self.acc(grads, *x, Tensor::full(s.shape(), v));
            }
            Op::GatherRows { x, idx } => {
                let (n, d) = rank2("gather_rows", self.value(*x))?;
                let mut gx = vec![T::zero(); n * d];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[k * d + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(&[n, d], gx)?);
            }
            Op::CatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let piece = g[offset..offset + len].to_vec();
                        self.acc(grads, p, Tensor::new(self.shape(p), piece)?);
                    }
                    offset += len;
                }
            }
            Op::CatCols(parts) => {
                let (n, total) = rank2("cat_cols", y)?;
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let mut piece = Vec::with_capacity(n * w);
                        for i in 0..n {
                            piece.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        self.acc(grads, p, Tensor::new(&[n, w], piece)?);
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = rank2("slice_cols", self.value(*x))?;
                let len = y.shape()[1];
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..len {
                        gx[i * d + start + j] = g[i * len + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(&[n, d], gx)?);
            }
            Op::Reshape(x) => {
                let gx = gy.clone().reshape(self.shape(*x))?;
                self.acc(grads, *x, gx);
            }
            Op::Pick { x, idx } => {
                let xs = self.value(*x);
                let (_, d) = xs.dims2()?;
                let mut gx = vec![T::zero(); xs.len()];
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gx[r * d + c] += g[k];
                }
                self.acc(grads, *x, Tensor::new(xs.shape(), gx)?);
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let diff: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &t)| k * (x - t))
                    .collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape(), neg)?);
                }
                self.acc(grads, *a, Tensor::new(av.shape(), diff)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_over_axis_zero_of_ones() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::ones(&[2, 3]));
        let y = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.shape(y), &[3]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let w = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.variable(t(&[3], &[0.1, -2.0, 5.0]));
        let target = g.constant(t(&[3], &[0.1, -2.0, 5.0]));
        let loss = g.mse(x, target).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::<f64>::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::<f64>::ones(&[2, 3]));
        let b = g.constant(Tensor::<f64>::ones(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[2, 3], &[0.3, -1.0, 2.5, 10.0, 10.0, -4.0]));
        let s = g.softmax_rows(x).unwrap();
        let ls = g.log_softmax_rows(x).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(ls).data()) {
            assert_abs_diff_eq!(a.ln(), *b, epsilon = 1e-6);
        }
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn shared_param_node_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", t(&[1], &[3.0])).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let collected: Vec<_> = grads.param_grads().collect();
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].1.data(), &[6.0]);
    }
}
