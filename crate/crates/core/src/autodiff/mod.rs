//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes; operations record their
//! parents so [`Tape::backward`] can sweep the arena once in reverse
//! creation order (which is a topological order by construction) and
//! accumulate gradients on every leaf. Graphs are rebuilt per training
//! step; nothing is cached across steps.
//!
//! Constant subgraphs (frozen encoder features, prototypes, ground-truth
//! targets) are inserted with [`Tape::constant`] and skipped entirely by
//! the backward sweep.

mod check;

pub use check::{grad_check, registered_op_checks, GradCheckReport, OpCheck};

use crate::linalg::{self, LinalgError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("gather index {index:?} out of bounds for shape {shape:?}")]
    GatherOutOfBounds { index: Vec<usize>, shape: Vec<usize> },
    #[error("{op} expects {expected}, got shape {shape:?}")]
    BadOperand {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Sqrt(usize),
    Log(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    GatherCell { src: usize, y: usize, x: usize },
    GatherFlat { src: usize, index: usize },
    BlockAvgPool { src: usize, block: usize },
    Reshape(usize),
    /// log det of an SPD matrix; the inverse is cached at forward time so
    /// the backward pass is a single scaled accumulation.
    LogDetSpd { src: usize, inverse: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never visits it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a).scale(c);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a).map(|v| v + c);
        let rg = self.needs(a);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, AdError> {
        let value = self.value(a).transpose()?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(a);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.needs(a);
        self.push(value, Op::Sqrt(a.0), rg)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(f64::ln);
        let rg = self.needs(a);
        self.push(value, Op::Log(a.0), rg)
    }

    /// Clamp into [lo, hi]; gradient passes through inside the interval
    /// (inclusive) and is zero where the input was clamped.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.needs(a);
        self.push(value, Op::Clamp { src: a.0, lo, hi }, rg)
    }

    pub fn clamp_min(&mut self, a: VarId, lo: f64) -> VarId {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// Softmax over all entries (max-shifted for stability).
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = Tensor::new(x.shape().to_vec(), exps.iter().map(|&e| e / total).collect())
            .expect("softmax preserves shape");
        let rg = self.needs(a);
        self.push(value, Op::Softmax(a.0), rg)
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(value, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.needs(a);
        self.push(value, Op::Mean(a.0), rg)
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId, AdError> {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(AdError::BadOperand {
                    op: "concat",
                    expected: "1-D tensors",
                    shape: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rg |= self.needs(p);
        }
        let value = Tensor::vector(&data);
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Channel vector at cell (y, x) of an `[S, S, C]` field.
    pub fn gather_cell(&mut self, a: VarId, y: usize, x: usize) -> Result<VarId, AdError> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(AdError::BadOperand {
                op: "gather_cell",
                expected: "rank-3 field",
                shape: t.shape().to_vec(),
            });
        }
        let (rows, cols, ch) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if y >= rows || x >= cols {
            return Err(AdError::GatherOutOfBounds {
                index: vec![y, x],
                shape: t.shape().to_vec(),
            });
        }
        let start = (y * cols + x) * ch;
        let value = Tensor::vector(&t.data()[start..start + ch]);
        let rg = self.needs(a);
        Ok(self.push(value, Op::GatherCell { src: a.0, y, x }, rg))
    }

    /// Single element by flat (row-major) index, as a scalar node.
    pub fn gather_flat(&mut self, a: VarId, index: usize) -> Result<VarId, AdError> {
        let t = self.value(a);
        if index >= t.numel() {
            return Err(AdError::GatherOutOfBounds {
                index: vec![index],
                shape: t.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.needs(a);
        Ok(self.push(value, Op::GatherFlat { src: a.0, index }, rg))
    }

    /// Average non-overlapping `block x block` windows of an `[l, l, C]`
    /// map, producing `[l/block, l/block, C]`.
    pub fn block_average_pool(&mut self, a: VarId, block: usize) -> Result<VarId, AdError> {
        let t = self.value(a);
        if t.rank() != 3 || t.shape()[0] != t.shape()[1] {
            return Err(AdError::BadOperand {
                op: "block_average_pool",
                expected: "square rank-3 map",
                shape: t.shape().to_vec(),
            });
        }
        let (l, ch) = (t.shape()[0], t.shape()[2]);
        if block == 0 || !l.is_multiple_of(block) {
            return Err(AdError::BadOperand {
                op: "block_average_pool",
                expected: "side divisible by block",
                shape: t.shape().to_vec(),
            });
        }
        let r = l / block;
        let mut out = Tensor::zeros(&[r, r, ch]);
        let inv = 1.0 / (block * block) as f64;
        for oy in 0..r {
            for ox in 0..r {
                for dy in 0..block {
                    for dx in 0..block {
                        let iy = oy * block + dy;
                        let ix = ox * block + dx;
                        for c in 0..ch {
                            let v = t.at3(iy, ix, c);
                            let cur = out.at3(oy, ox, c);
                            out.set3(oy, ox, c, cur + v * inv);
                        }
                    }
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, Op::BlockAvgPool { src: a.0, block }, rg))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId, AdError> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// log det of a symmetric positive definite matrix node.
    ///
    /// Fails with a non-SPD error when the Cholesky factorization breaks
    /// down. Backward uses the (symmetrized) inverse.
    pub fn logdet_spd(&mut self, a: VarId) -> Result<VarId, AdError> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(AdError::BadOperand {
                op: "logdet_spd",
                expected: "square matrix",
                shape: t.shape().to_vec(),
            });
        }
        let n = t.shape()[0];
        let l = linalg::cholesky(t.data(), n)?;
        let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
        let inv = linalg::chol_inverse(&l, n);
        // symmetrize: the analytic gradient of logdet at a symmetric point
        let mut sym = inv.clone();
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::scalar(logdet),
            Op::LogDetSpd { src: a.0, inverse: sym },
            rg,
        ))
    }

    /// Affine layer `W x + b` for a 1-D input.
    pub fn dense(&mut self, w: VarId, x: VarId, b: VarId) -> Result<VarId, AdError> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Dot product of two 1-D nodes.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// Reverse sweep from a scalar root; every leaf gradient afterwards
    /// equals d(root)/d(leaf). Nodes feeding several consumers accumulate.
    pub fn backward(&self, root: VarId) -> Result<Gradients, AdError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(AdError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        match &mut grads[target] {
            Some(existing) => {
                *existing = existing.add(&delta).expect("gradient shapes agree");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |p: usize| self.nodes[p].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.mul(&self.nodes[*b].value).expect("shape");
                    Self::accumulate(grads, *a, d);
                }
                if needs(*b) {
                    let d = g.mul(&self.nodes[*a].value).expect("shape");
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                match bv.rank() {
                    2 => {
                        if needs(*a) {
                            let bt = bv.transpose().expect("2-D");
                            Self::accumulate(grads, *a, g.matmul(&bt).expect("shape"));
                        }
                        if needs(*b) {
                            let at = av.transpose().expect("2-D");
                            Self::accumulate(grads, *b, at.matmul(g).expect("shape"));
                        }
                    }
                    1 => {
                        // y = A x: dA = g x^T (outer), dx = A^T g
                        if needs(*a) {
                            let (m, k) = (av.shape()[0], av.shape()[1]);
                            let mut d = Tensor::zeros(&[m, k]);
                            for r in 0..m {
                                let gr = g.data()[r];
                                for c in 0..k {
                                    d.set2(r, c, gr * bv.data()[c]);
                                }
                            }
                            Self::accumulate(grads, *a, d);
                        }
                        if needs(*b) {
                            let at = av.transpose().expect("2-D");
                            Self::accumulate(grads, *b, at.matmul(g).expect("shape"));
                        }
                    }
                    _ => unreachable!("matmul operands validated at forward"),
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.transpose().expect("2-D"));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let src = &self.nodes[*a].value;
                    let d = g.zip(src, "relu-grad", |gv, x| if x > 0.0 { gv } else { 0.0 });
                    Self::accumulate(grads, *a, d.expect("shape"));
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    let d = g.zip(y, "tanh-grad", |gv, yv| gv * (1.0 - yv * yv));
                    Self::accumulate(grads, *a, d.expect("shape"));
                }
            }
            Op::Sqrt(a) => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    let d = g.zip(y, "sqrt-grad", |gv, yv| gv / (2.0 * yv));
                    Self::accumulate(grads, *a, d.expect("shape"));
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let src = &self.nodes[*a].value;
                    let d = g.zip(src, "log-grad", |gv, x| gv / x);
                    Self::accumulate(grads, *a, d.expect("shape"));
                }
            }
            Op::Clamp { src, lo, hi } => {
                if needs(*src) {
                    let x = &self.nodes[*src].value;
                    let d = g.zip(x, "clamp-grad", |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    Self::accumulate(grads, *src, d.expect("shape"));
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    let inner: f64 = g
                        .data()
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&gv, &yv)| gv * yv)
                        .sum();
                    let d = g.zip(y, "softmax-grad", |gv, yv| (gv - inner) * yv);
                    Self::accumulate(grads, *a, d.expect("shape"));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let shape = self.nodes[*a].value.shape();
                    Self::accumulate(grads, *a, Tensor::filled(shape, g.item()));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let src = &self.nodes[*a].value;
                    let v = g.item() / src.numel() as f64;
                    Self::accumulate(grads, *a, Tensor::filled(src.shape(), v));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if needs(p) {
                        let seg = Tensor::vector(&g.data()[offset..offset + len]);
                        Self::accumulate(grads, p, seg);
                    }
                    offset += len;
                }
            }
            Op::GatherCell { src, y, x } => {
                if needs(*src) {
                    let shape = self.nodes[*src].value.shape().to_vec();
                    let (cols, ch) = (shape[1], shape[2]);
                    let mut d = Tensor::zeros(&shape);
                    let start = (y * cols + x) * ch;
                    d.data_mut()[start..start + ch].copy_from_slice(g.data());
                    Self::accumulate(grads, *src, d);
                }
            }
            Op::GatherFlat { src, index } => {
                if needs(*src) {
                    let shape = self.nodes[*src].value.shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    d.data_mut()[*index] = g.item();
                    Self::accumulate(grads, *src, d);
                }
            }
            Op::BlockAvgPool { src, block } => {
                if needs(*src) {
                    let shape = self.nodes[*src].value.shape().to_vec();
                    let (l, ch) = (shape[0], shape[2]);
                    let inv = 1.0 / (block * block) as f64;
                    let mut d = Tensor::zeros(&shape);
                    for iy in 0..l {
                        for ix in 0..l {
                            let oy = iy / block;
                            let ox = ix / block;
                            for c in 0..ch {
                                d.set3(iy, ix, c, g.at3(oy, ox, c) * inv);
                            }
                        }
                    }
                    Self::accumulate(grads, *src, d);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let shape = self.nodes[*a].value.shape();
                    let d = g.reshape(shape).expect("same element count");
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::LogDetSpd { src, inverse } => {
                if needs(*src) {
                    let shape = self.nodes[*src].value.shape().to_vec();
                    let d = Tensor::new(shape, inverse.iter().map(|&v| v * g.item()).collect())
                        .expect("square");
                    Self::accumulate(grads, *src, d);
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if the node was never reached.
    pub fn get_or_zeros(&self, v: VarId, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_input() {
        // root = 0.5 * ||x||^2, x = (3, 4) -> grad = (3, 4)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[3.0, 4.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let root = tape.scale(s, 0.5);
        assert!((tape.value(root).item() - 12.5).abs() < 1e-12);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x consumed twice by different ops
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        // dy/dx = 2x + 1 = 7
        assert!((grads.get(x).unwrap().item() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0, 0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(AdError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn gather_cell_bounds_checked() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[4, 4, 2]));
        assert!(tape.gather_cell(f, 4, 0).is_err());
        assert!(tape.gather_cell(f, 1, 2).is_ok());
    }

    #[test]
    fn constant_subgraph_gets_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[5.0, 5.0]));
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn block_pool_averages_blocks() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(&[4, 4, 1]);
        for y in 0..4 {
            for x in 0..4 {
                t.set3(y, x, 0, (y * 4 + x) as f64);
            }
        }
        let v = tape.leaf(t);
        let p = tape.block_average_pool(v, 2).unwrap();
        // top-left block: mean(0,1,4,5) = 2.5
        assert!((tape.value(p).at3(0, 0, 0) - 2.5).abs() < 1e-12);
        assert!((tape.value(p).at3(1, 1, 0) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn logdet_spd_value_and_error() {
        let mut tape = Tape::new();
        let spd = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 1.0, 1.0, 2.0]).unwrap());
        let ld = tape.logdet_spd(spd).unwrap();
        assert!((tape.value(ld).item() - 5.0f64.ln()).abs() < 1e-12);
        let bad = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap());
        assert!(tape.logdet_spd(bad).is_err());
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(&[0.3, -0.7, 1.1]));
            let w = tape.leaf(Tensor::matrix(3, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9]).unwrap());
            let h = tape.matmul(w, x).unwrap();
            let r = tape.tanh(h);
            let s = tape.mul(r, r).unwrap();
            let loss = tape.sum(s);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                grads.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
