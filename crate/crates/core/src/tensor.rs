//! Dense row-major `f64` tensors and the raw kernels behind every taped op.
//!
//! A [`Tensor`] is immutable once built. Tensors produced by a [`Tape`](crate::autodiff::Tape)
//! carry a [`NodeId`] so later ops on the same tape can link back to them; the
//! kernels in this module ignore that handle and always return untaped values.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle of a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Resolve a possibly negative axis against `rank`.
pub fn normalize_axis(axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    Ok(a as usize)
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    left: a.to_vec(),
                    right: b.to_vec(),
                    context: "broadcast",
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `target` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visit every multi-index of `shape` in row-major order, yielding the linear
/// offsets into two strided operands.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        f(oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            let reason = format!("expected {} elements, got {}", numel(&shape), data.len());
            return Err(Error::InvalidShape { shape, reason });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark this value as a differentiable leaf. Clears any tape handle.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.node = None;
        self
    }

    /// Same values, no gradient tracking, no tape handle.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn attach(mut self, node: NodeId, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        let s = strides(&self.shape);
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = *self.shape.last().unwrap_or(&1);
        &self.data[i * d..(i + 1) * d]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = &self.data;
        let b = &other.data;
        if self.shape == other.shape {
            let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape)?;
        let n = numel(&out_shape);
        if other.data.len() == 1 {
            let y = b[0];
            return Ok(Self::from_parts(out_shape, a.iter().map(|&x| f(x, y)).collect()));
        }
        if self.data.len() == 1 {
            let x = a[0];
            return Ok(Self::from_parts(out_shape, b.iter().map(|&y| f(x, y)).collect()));
        }
        if out_shape == self.shape && is_suffix(&other.shape, &out_shape) {
            let mut data = Vec::with_capacity(n);
            for chunk in a.chunks_exact(b.len()) {
                data.extend(chunk.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Self::from_parts(out_shape, data));
        }
        if out_shape == other.shape && is_suffix(&self.shape, &out_shape) {
            let mut data = Vec::with_capacity(n);
            for chunk in b.chunks_exact(a.len()) {
                data.extend(a.iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Self::from_parts(out_shape, data));
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(n);
        for_each_offset2(&out_shape, &sa, &sb, |oa, ob| data.push(f(a[oa], b[ob])));
        Ok(Self::from_parts(out_shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
                context: "reshape",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        if rank >= 2 && perm[..rank - 2].iter().enumerate().all(|(i, &p)| i == p) && perm[rank - 2] == rank - 1 {
            return Ok(self.swap_last2());
        }
        let src = strides(&self.shape);
        let permuted: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let zero = vec![0; rank];
        let mut data = Vec::with_capacity(self.numel());
        if rank >= 2 && perm[rank - 1] == rank - 1 {
            // Innermost axis stays put: copy contiguous rows.
            let inner = self.shape[rank - 1];
            for_each_offset2(&out_shape[..rank - 1], &permuted[..rank - 1], &zero[..rank - 1], |o, _| {
                data.extend_from_slice(&self.data[o..o + inner])
            });
        } else {
            for_each_offset2(&out_shape, &permuted, &zero, |o, _| data.push(self.data[o]));
        }
        Ok(Self::from_parts(out_shape, data))
    }

    fn swap_last2(&self) -> Tensor {
        let rank = self.ndim();
        let (m, n) = (self.shape[rank - 2], self.shape[rank - 1]);
        let batch = numel(&self.shape[..rank - 2]);
        let mut data = vec![0.0; self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(rank - 2, rank - 1);
        Self::from_parts(shape, data)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        Ok(self.swap_last2())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let target = broadcast_shapes(&self.shape, shape)?;
        if target != shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
                context: "broadcast_to",
            });
        }
        if self.shape == shape {
            return Ok(self.detach());
        }
        let n = numel(shape);
        if is_suffix(&self.shape, shape) || self.numel() == 1 {
            let m = self.numel();
            return Ok(Self::from_parts(shape.to_vec(), (0..n).map(|i| self.data[i % m]).collect()));
        }
        let sa = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut data = Vec::with_capacity(n);
        for_each_offset2(shape, &sa, &zero, |o, _| data.push(self.data[o]));
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Sum away broadcast axes so the result has `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.detach());
        }
        let target = broadcast_shapes(shape, &self.shape)?;
        if target != self.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
                context: "sum_to",
            });
        }
        let m = numel(shape);
        let mut out = vec![0.0; m];
        if is_suffix(shape, &self.shape) || m == 1 {
            for chunk in self.data.chunks(m) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        } else {
            let st = broadcast_strides(shape, &self.shape);
            let own = strides(&self.shape);
            for_each_offset2(&self.shape, &own, &st, |src, dst| out[dst] += self.data[src]);
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        (
            numel(&self.shape[..axis]),
            self.shape[axis],
            numel(&self.shape[axis + 1..]),
        )
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = self.axis_split(ax);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        Ok(Self::from_parts(shape, out))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    pub fn max_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = self.axis_split(ax);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = self.data[(o * len + l) * inner + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        Ok(Self::from_parts(shape, out))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = self.axis_split(ax);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(self.data[idx(l)]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (self.data[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            left: self.shape.clone(),
            right: other.shape.clone(),
            context: "matmul",
        };
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.ndim(), other.ndim());
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        // [..., m, k] @ [k, n]: fold batch into rows.
        if rb == 2 {
            let rows = numel(&self.shape[..ra - 1]);
            let mut out = vec![0.0; rows * n];
            gemm(&self.data, &other.data, &mut out, rows, k, n);
            let mut shape = self.shape[..ra - 1].to_vec();
            shape.push(n);
            return Ok(Self::from_parts(shape, out));
        }
        let batch = broadcast_shapes(&self.shape[..ra - 2], &other.shape[..rb - 2]).map_err(|_| mismatch())?;
        let nb = numel(&batch);
        let sa = broadcast_strides(&self.shape[..ra - 2], &batch);
        let sb = broadcast_strides(&other.shape[..rb - 2], &batch);
        let mut out = vec![0.0; nb * m * n];
        let mut bi = 0;
        for_each_offset2(&batch, &sa, &sb, |oa, ob| {
            let a = &self.data[oa * m * k..(oa + 1) * m * k];
            let b = &other.data[ob * k * n..(ob + 1) * k * n];
            gemm(a, b, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            bi += 1;
        });
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        Ok(Self::from_parts(shape, out))
    }

    // ---- indexing ----------------------------------------------------------

    /// Rows of a 2-D table selected by `ids`: `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "gather needs a 2-D table".into(),
            });
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    limit: v,
                    context: "gather",
                });
            }
            data.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Ok(Self::from_parts(vec![ids.len(), d], data))
    }

    /// Accumulate rows of `[ids.len(), D]` into a zero `[rows, D]` table (adjoint of gather).
    pub fn scatter_rows(&self, ids: &[usize], rows: usize) -> Result<Tensor> {
        if self.ndim() != 2 || self.shape[0] != ids.len() {
            return Err(Error::LengthMismatch {
                expected: ids.len(),
                actual: self.shape.first().copied().unwrap_or(0),
                context: "scatter",
            });
        }
        let d = self.shape[1];
        let mut out = vec![0.0; rows * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    limit: rows,
                    context: "scatter",
                });
            }
            for j in 0..d {
                out[id * d + j] += self.data[r * d + j];
            }
        }
        Ok(Self::from_parts(vec![rows, d], out))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, full, inner) = self.axis_split(ax);
        if start + len > full {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                limit: full,
                context: "narrow",
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[ax] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Embed into zeros of extent `total` along `axis`, starting at `start` (adjoint of narrow).
    pub fn pad(&self, axis: isize, start: usize, total: usize) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = self.axis_split(ax);
        if start + len > total {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                limit: total,
                context: "pad",
            });
        }
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[ax] = total;
        Ok(Self::from_parts(shape, data))
    }

    pub fn concat(parts: &[&Tensor], axis: isize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let ax = normalize_axis(axis, first.ndim())?;
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                    context: "concat",
                });
            }
        }
        let outer = numel(&first.shape[..ax]);
        let inner = numel(&first.shape[ax + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[ax]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[ax] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[ax] = total;
        Ok(Self::from_parts(shape, data))
    }

    // ---- serialization -----------------------------------------------------

    /// Header line `{"shape":[...]}` followed by little-endian `f64` values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_string(&TensorHeader {
            shape: self.shape.clone(),
        })?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.numel() * 8);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Tensor> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: TensorHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let n = numel(&header.shape);
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self::from_parts(header.shape, data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        Self::read_from(&mut std::io::Cursor::new(bytes))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
}

/// `out += a[m,k] @ b[k,n]`, i-k-j order.
/// `out += a @ b` for row-major `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the row-major extents passed with unit column strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1);
    }
}
