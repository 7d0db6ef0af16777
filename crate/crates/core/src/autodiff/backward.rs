use std::collections::BTreeMap;

use super::{GradientMap, Op, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Gradients of a scalar `loss` for every named parameter on the tape.
    /// Parameters that do not influence the loss receive zeros.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap> {
        let grads = self.propagate(loss, false)?;
        let mut out = BTreeMap::new();
        let params: Vec<(String, usize)> = self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        for (name, idx) in params {
            let g = match grads.get(idx).and_then(|g| g.as_ref()) {
                Some(g) => g.detach(),
                None => Tensor::zeros(self.nodes[idx].value.shape()),
            };
            out.insert(name, g);
        }
        Ok(GradientMap::from_map(out))
    }

    /// Gradients of `loss` for arbitrary tensors on this tape.
    ///
    /// With `create_graph` the returned gradients are themselves taped and can
    /// be differentiated again; otherwise they are plain values and the tape is
    /// left as it was.
    pub fn grad(&mut self, loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        let idx: Vec<usize> = wrt
            .iter()
            .map(|t| match t.node() {
                Some(id) if id.tape == self.id => Ok(id.index),
                Some(_) => Err(Error::ForeignTensor),
                None => Err(Error::Config("gradient requested for a tensor not on the tape".into())),
            })
            .collect::<Result<_>>()?;
        let grads = self.propagate(loss, create_graph)?;
        Ok(idx
            .into_iter()
            .map(|i| match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) if create_graph => g.clone(),
                Some(g) => g.detach(),
                None => Tensor::zeros(self.nodes[i].value.shape()),
            })
            .collect())
    }

    fn propagate(&mut self, loss: &Tensor, create_graph: bool) -> Result<Vec<Option<Tensor>>> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let li = match loss.node() {
            Some(id) if id.tape == self.id => id.index,
            Some(_) => return Err(Error::ForeignTensor),
            None => return Err(Error::Config("loss is not on the tape".into())),
        };
        let mark = self.nodes.len();
        let was_recording = self.recording;
        self.recording = create_graph;
        let result = self.sweep(li, loss.shape());
        self.recording = was_recording;
        let mut grads = result?;
        if !create_graph {
            for g in grads.iter_mut().flatten() {
                *g = g.detach();
            }
            self.nodes.truncate(mark);
        }
        Ok(grads)
    }

    fn sweep(&mut self, li: usize, loss_shape: &[usize]) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        if !self.nodes[li].requires_grad {
            return Ok(grads);
        }
        grads[li] = Some(self.constant(&Tensor::ones(loss_shape)));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let input_grads = self.vjp(&op, &inputs, i, &g)?;
            for (inp, gi) in inputs.into_iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                grads[inp] = Some(match grads[inp].take() {
                    None => gi,
                    Some(prev) => self.add(&prev, &gi)?,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian product of node `out` for upstream gradient `g`, one entry per input.
    fn vjp(&mut self, op: &Op, inputs: &[usize], out: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = |tape: &Tape, k: usize| tape.handle(inputs[k]);
        let need = |tape: &Tape, k: usize| tape.nodes[inputs[k]].requires_grad;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => {
                let (a, b) = (x(self, 0), x(self, 1));
                let ga = if need(self, 0) { Some(self.sum_to(g, a.shape())?) } else { None };
                let gb = if need(self, 1) { Some(self.sum_to(g, b.shape())?) } else { None };
                vec![ga, gb]
            }
            Op::Sub => {
                let (a, b) = (x(self, 0), x(self, 1));
                let ga = if need(self, 0) { Some(self.sum_to(g, a.shape())?) } else { None };
                let gb = if need(self, 1) {
                    let neg = self.scale(g, -1.0)?;
                    Some(self.sum_to(&neg, b.shape())?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (x(self, 0), x(self, 1));
                let ga = if need(self, 0) {
                    let t = self.mul(g, &b)?;
                    Some(self.sum_to(&t, a.shape())?)
                } else {
                    None
                };
                let gb = if need(self, 1) {
                    let t = self.mul(g, &a)?;
                    Some(self.sum_to(&t, b.shape())?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Div => {
                let (a, b) = (x(self, 0), x(self, 1));
                let y = self.handle(out);
                let gb_over = self.div(g, &b)?;
                let ga = if need(self, 0) { Some(self.sum_to(&gb_over, a.shape())?) } else { None };
                let gb = if need(self, 1) {
                    let t = self.mul(&gb_over, &y)?;
                    let t = self.scale(&t, -1.0)?;
                    Some(self.sum_to(&t, b.shape())?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(self.scale(g, *c)?)],
            Op::MatMul => {
                let (a, b) = (x(self, 0), x(self, 1));
                let ga = if need(self, 0) {
                    let bt = self.transpose(&b)?;
                    let t = self.matmul(g, &bt)?;
                    Some(self.sum_to(&t, a.shape())?)
                } else {
                    None
                };
                let gb = if need(self, 1) {
                    if b.ndim() == 2 && a.ndim() > 2 {
                        // Fold batch axes into rows: [N, k]^T @ [N, n].
                        let k = a.shape()[a.ndim() - 1];
                        let n = b.shape()[1];
                        let rows = a.numel() / k;
                        let a2 = self.reshape(&a, &[rows, k])?;
                        let g2 = self.reshape(g, &[rows, n])?;
                        let a2t = self.transpose(&a2)?;
                        Some(self.matmul(&a2t, &g2)?)
                    } else {
                        let at = self.transpose(&a)?;
                        let t = self.matmul(&at, g)?;
                        Some(self.sum_to(&t, b.shape())?)
                    }
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Exp => {
                let y = self.handle(out);
                vec![Some(self.mul(g, &y)?)]
            }
            Op::Log => {
                let a = x(self, 0);
                vec![Some(self.div(g, &a)?)]
            }
            Op::Tanh => {
                let y = self.handle(out);
                let y2 = self.mul(&y, &y)?;
                let one = Tensor::scalar(1.0);
                let d = self.sub(&one, &y2)?;
                vec![Some(self.mul(g, &d)?)]
            }
            Op::Rsqrt => {
                let y = self.handle(out);
                let y2 = self.mul(&y, &y)?;
                let y3 = self.mul(&y2, &y)?;
                let t = self.mul(g, &y3)?;
                vec![Some(self.scale(&t, -0.5)?)]
            }
            Op::Abs => {
                let a = x(self, 0);
                let sign = a.map(f64::signum);
                vec![Some(self.mul(g, &sign)?)]
            }
            Op::SumAxis { axis, keepdim } => {
                let a = x(self, 0);
                let g = if *keepdim {
                    g.clone()
                } else {
                    let mut s = a.shape().to_vec();
                    s[*axis] = 1;
                    self.reshape(g, &s)?
                };
                vec![Some(self.broadcast_to(&g, a.shape())?)]
            }
            Op::SumAll | Op::SumTo => {
                let a = x(self, 0);
                vec![Some(self.broadcast_to(g, a.shape())?)]
            }
            Op::BroadcastTo => {
                let a = x(self, 0);
                vec![Some(self.sum_to(g, a.shape())?)]
            }
            Op::Reshape => {
                let a = x(self, 0);
                vec![Some(self.reshape(g, a.shape())?)]
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(self.permute(g, &inv)?)]
            }
            Op::Softmax(axis) => {
                let y = self.handle(out);
                let gy = self.mul(g, &y)?;
                let s = self.sum_axis(&gy, *axis as isize, true)?;
                let d = self.sub(g, &s)?;
                vec![Some(self.mul(&y, &d)?)]
            }
            Op::Gather(ids) => {
                let rows = x(self, 0).shape()[0];
                vec![Some(self.scatter_shared(g, ids.clone(), rows)?)]
            }
            Op::Scatter(ids) => vec![Some(self.gather_shared(g, ids.clone())?)],
            Op::Narrow { axis, start } => {
                let total = x(self, 0).shape()[*axis];
                vec![Some(self.pad(g, *axis as isize, *start, total)?)]
            }
            Op::Pad { axis, start } => {
                let len = x(self, 0).shape()[*axis];
                vec![Some(self.narrow(g, *axis as isize, *start, len)?)]
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for k in 0..inputs.len() {
                    let len = x(self, k).shape()[*axis];
                    out.push(if need(self, k) {
                        Some(self.narrow(g, *axis as isize, offset, len)?)
                    } else {
                        None
                    });
                    offset += len;
                }
                out
            }
        })
    }
}
