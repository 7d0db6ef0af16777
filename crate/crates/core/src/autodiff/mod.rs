//! Eager reverse-mode automatic differentiation.
//!
//! Every op on a [`Tape`] computes its value immediately and appends a node.
//! [`Tape::grad`] walks the nodes backwards; each vector-Jacobian product is
//! itself written with taped primitives, so with `create_graph` the gradients
//! stay differentiable (used by the gradient-matching attack).

mod backward;
mod check;
mod composite;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use check::{finite_diff_check, GradientMap};

use crate::error::{Error, Result};
use crate::tensor::{normalize_axis, NodeId, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Exp,
    Log,
    Tanh,
    Rsqrt,
    Abs,
    SumAxis { axis: usize, keepdim: bool },
    SumAll,
    BroadcastTo,
    SumTo,
    Reshape,
    Permute(Vec<usize>),
    Softmax(usize),
    Gather(Arc<Vec<usize>>),
    Scatter(Arc<Vec<usize>>),
    Narrow { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
    Concat(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass. Single owner; discard after use.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn handle(&self, index: usize) -> Tensor {
        let n = &self.nodes[index];
        n.value.clone().attach(
            NodeId {
                tape: self.id,
                index,
            },
            n.requires_grad,
        )
    }

    /// Node index for `t`, registering it as a leaf when it is not on this tape yet.
    fn input(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(id) if id.tape == self.id => Ok(id.index),
            Some(_) => Err(Error::ForeignTensor),
            None => {
                let rg = t.requires_grad();
                self.nodes.push(Node {
                    op: Op::Leaf,
                    inputs: Vec::new(),
                    value: t.detach(),
                    requires_grad: rg,
                });
                Ok(self.nodes.len() - 1)
            }
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Tensor {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.handle(self.nodes.len() - 1)
    }

    /// Register a constant (never differentiated).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t.detach(),
            requires_grad: false,
        });
        self.handle(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t.detach(),
            requires_grad: true,
        });
        self.handle(self.nodes.len() - 1)
    }

    /// Register a named trainable parameter; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Tensor {
        let h = self.leaf(t);
        self.params.insert(name.to_string(), h.node().expect("fresh leaf").index);
        h
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---- binary ----------------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.add(b)?;
        let ins = vec![self.input(a)?, self.input(b)?];
        Ok(self.push(Op::Add, ins, v))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.sub(b)?;
        let ins = vec![self.input(a)?, self.input(b)?];
        Ok(self.push(Op::Sub, ins, v))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.mul(b)?;
        let ins = vec![self.input(a)?, self.input(b)?];
        Ok(self.push(Op::Mul, ins, v))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.div(b)?;
        let ins = vec![self.input(a)?, self.input(b)?];
        Ok(self.push(Op::Div, ins, v))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.matmul(b)?;
        let ins = vec![self.input(a)?, self.input(b)?];
        Ok(self.push(Op::MatMul, ins, v))
    }

    // ---- unary -----------------------------------------------------------

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let v = a.scale(c);
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Scale(c), ins, v))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.map(f64::exp);
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Exp, ins, v))
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.map(f64::ln);
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Log, ins, v))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.map(f64::tanh);
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Tanh, ins, v))
    }

    /// `1/sqrt(x)`.
    pub fn rsqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.map(|x| 1.0 / x.sqrt());
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Rsqrt, ins, v))
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.map(f64::abs);
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Abs, ins, v))
    }

    // ---- reductions & shape ---------------------------------------------

    pub fn sum_axis(&mut self, a: &Tensor, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = normalize_axis(axis, a.ndim())?;
        let v = a.sum_axis(axis, keepdim)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::SumAxis { axis: ax, keepdim }, ins, v))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = Tensor::scalar(a.sum_all());
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::SumAll, ins, v))
    }

    pub fn broadcast_to(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = a.broadcast_to(shape)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::BroadcastTo, ins, v))
    }

    pub fn sum_to(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if a.shape() == shape {
            let i = self.input(a)?;
            return Ok(self.handle(i));
        }
        let v = a.sum_to(shape)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::SumTo, ins, v))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = a.reshape(shape)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Reshape, ins, v))
    }

    pub fn permute(&mut self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let v = a.permute(perm)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Permute(perm.to_vec()), ins, v))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let r = a.ndim();
        if r < 2 {
            return a.transpose_last2();
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn softmax(&mut self, a: &Tensor, axis: isize) -> Result<Tensor> {
        let ax = normalize_axis(axis, a.ndim())?;
        let v = a.softmax(axis)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Softmax(ax), ins, v))
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn gather(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let v = table.gather_rows(ids)?;
        let ins = vec![self.input(table)?];
        Ok(self.push(Op::Gather(Arc::new(ids.to_vec())), ins, v))
    }

    pub(crate) fn gather_shared(&mut self, table: &Tensor, ids: Arc<Vec<usize>>) -> Result<Tensor> {
        let v = table.gather_rows(&ids)?;
        let ins = vec![self.input(table)?];
        Ok(self.push(Op::Gather(ids), ins, v))
    }

    pub(crate) fn scatter_shared(&mut self, src: &Tensor, ids: Arc<Vec<usize>>, rows: usize) -> Result<Tensor> {
        let v = src.scatter_rows(&ids, rows)?;
        let ins = vec![self.input(src)?];
        Ok(self.push(Op::Scatter(ids), ins, v))
    }

    pub fn narrow(&mut self, a: &Tensor, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = normalize_axis(axis, a.ndim())?;
        let v = a.narrow(axis, start, len)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Narrow { axis: ax, start }, ins, v))
    }

    pub fn pad(&mut self, a: &Tensor, axis: isize, start: usize, total: usize) -> Result<Tensor> {
        let ax = normalize_axis(axis, a.ndim())?;
        let v = a.pad(axis, start, total)?;
        let ins = vec![self.input(a)?];
        Ok(self.push(Op::Pad { axis: ax, start }, ins, v))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: isize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let ax = normalize_axis(axis, first.ndim())?;
        let v = Tensor::concat(parts, axis)?;
        let ins = parts.iter().map(|p| self.input(p)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(Op::Concat(ax), ins, v))
    }
}
