//! Reverse-mode gradient tape.
//!
//! Operations record their inputs in order; `backward` walks the nodes in
//! reverse and accumulates vector-Jacobian products. A tape is single-use:
//! a second backward is an error, never a silent gradient accumulation.

use super::tensor::{self, BinaryKind, ReduceKind, Tensor, UnaryKind};
use super::{NumericsError, Result};
use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Unary { kind: UnaryKind, a: NodeId },
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Reduce { kind: ReduceKind, a: NodeId, axis: Option<usize> },
    LogSumExp { a: NodeId, axis: usize },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    SliceCols { a: NodeId, start: usize },
    Reshape { a: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or a checked input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Non-differentiable leaf (data, noise draws, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::apply_binary(kind, self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> Result<NodeId> {
        let v = tensor::apply_unary(kind, self.value(a))?;
        Ok(self.push(v, Op::Unary { kind, a }))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let v = tensor::reduce(kind, self.value(a), axis)?;
        Ok(self.push(v, Op::Reduce { kind, a, axis }))
    }

    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = tensor::log_sum_exp(self.value(a), axis)?;
        Ok(self.push(v, Op::LogSumExp { a, axis }))
    }

    /// Clamp to [lo, hi]; gradient passes inside the closed range, zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = tensor::clamp(self.value(a), lo, hi)?;
        Ok(self.push(v, Op::Clamp { a, lo, hi }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = tensor::slice_cols(self.value(a), start, end)?;
        Ok(self.push(v, Op::SliceCols { a, start }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a }))
    }

    /// Convenience: constant scalar node.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// a * c for a scalar constant c.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// Gradients of a scalar loss w.r.t. every differentiable leaf.
    /// Consumes the tape's one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<HashMap<NodeId, Tensor>> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if loss >= self.nodes.len() {
            return Err(NumericsError::UnknownNode(loss));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), 1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[id].op.clone() {
                Op::Leaf { .. } => {
                    grads[id] = Some(g); // keep for reporting
                    continue;
                }
                Op::Unary { kind, a } => {
                    let local = self.unary_vjp(kind, a, id, &g)?;
                    self.accumulate(&mut grads, a, local)?;
                }
                Op::Binary { kind, a, b } => {
                    let (ga, gb) = self.binary_vjp(kind, a, b, id, &g)?;
                    self.accumulate(&mut grads, a, ga)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::Matmul { a, b } => {
                    let at = self.nodes[a].value.transpose()?;
                    let bt = self.nodes[b].value.transpose()?;
                    let ga = tensor::matmul(&g, &bt)?;
                    let gb = tensor::matmul(&at, &g)?;
                    self.accumulate(&mut grads, a, ga)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::Reduce { kind, a, axis } => {
                    let in_shape = self.nodes[a].value.shape().to_vec();
                    let mut ga = match axis {
                        None => Tensor::full(&in_shape, g.scalar_value()),
                        Some(ax) => tensor::expand_axis(&g, ax, in_shape[ax])?,
                    };
                    if kind == ReduceKind::Mean {
                        let count = match axis {
                            None => self.nodes[a].value.numel(),
                            Some(ax) => in_shape[ax],
                        } as f64;
                        for v in ga.data_mut() {
                            *v /= count;
                        }
                    }
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::LogSumExp { a, axis } => {
                    // d/dx LSE = softmax(x) along the axis.
                    let extent = self.nodes[a].value.shape()[axis];
                    let out_exp = tensor::expand_axis(&self.nodes[id].value, axis, extent)?;
                    let diff = tensor::apply_binary(BinaryKind::Sub, &self.nodes[a].value, &out_exp)?;
                    let soft = tensor::apply_unary(UnaryKind::Exp, &diff)?;
                    let g_exp = tensor::expand_axis(&g, axis, extent)?;
                    let ga = tensor::apply_binary(BinaryKind::Mul, &soft, &g_exp)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Clamp { a, lo, hi } => {
                    let input = &self.nodes[a].value;
                    let mut ga = g.clone();
                    for (gv, &x) in ga.data_mut().iter_mut().zip(input.data()) {
                        if x < lo || x > hi {
                            *gv = 0.0;
                        }
                    }
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::SliceCols { a, start } => {
                    let in_shape = self.nodes[a].value.shape().to_vec();
                    let mut ga = Tensor::zeros(&in_shape);
                    let (rows, cols) = (in_shape[0], in_shape[1]);
                    let width = g.shape()[1];
                    for r in 0..rows {
                        for c in 0..width {
                            ga.data_mut()[r * cols + start + c] = g.data()[r * width + c];
                        }
                    }
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Reshape { a } => {
                    let ga = g.reshape(self.nodes[a].value.shape().to_vec())?;
                    self.accumulate(&mut grads, a, ga)?;
                }
            }
        }

        let mut out = HashMap::new();
        for (id, slot) in grads.into_iter().enumerate() {
            if let (Op::Leaf { requires_grad: true }, Some(g)) = (&self.nodes[id].op, slot) {
                out.insert(id, g);
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: Tensor,
    ) -> Result<()> {
        let g = tensor::reduce_to_shape(&g, self.nodes[id].value.shape())?;
        grads[id] = Some(match grads[id].take() {
            None => g,
            Some(acc) => tensor::apply_binary(BinaryKind::Add, &acc, &g)?,
        });
        Ok(())
    }

    fn unary_vjp(&self, kind: UnaryKind, a: NodeId, out: NodeId, g: &Tensor) -> Result<Tensor> {
        let x = &self.nodes[a].value;
        let y = &self.nodes[out].value;
        let mut d = g.clone();
        for (i, dv) in d.data_mut().iter_mut().enumerate() {
            let local = match kind {
                UnaryKind::Neg => -1.0,
                UnaryKind::Exp => y.data()[i],
                UnaryKind::Log => 1.0 / x.data()[i],
                UnaryKind::Sigmoid => y.data()[i] * (1.0 - y.data()[i]),
                UnaryKind::Relu => {
                    if x.data()[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Tanh => 1.0 - y.data()[i] * y.data()[i],
                UnaryKind::Square => 2.0 * x.data()[i],
                UnaryKind::Softplus => tensor::sigmoid(x.data()[i]),
            };
            *dv *= local;
        }
        Ok(d)
    }

    fn binary_vjp(
        &self,
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        _out: NodeId,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        match kind {
            BinaryKind::Add => Ok((g.clone(), g.clone())),
            BinaryKind::Sub => {
                let gb = tensor::apply_unary(UnaryKind::Neg, g)?;
                Ok((g.clone(), gb))
            }
            BinaryKind::Mul => {
                let ga = tensor::apply_binary(BinaryKind::Mul, g, vb)?;
                let gb = tensor::apply_binary(BinaryKind::Mul, g, va)?;
                Ok((ga, gb))
            }
            BinaryKind::Div => {
                let ga = tensor::apply_binary(BinaryKind::Div, g, vb)?;
                // -g * a / b^2
                let num = tensor::apply_binary(BinaryKind::Mul, g, va)?;
                let b2 = tensor::apply_binary(BinaryKind::Mul, vb, vb)?;
                let frac = tensor::apply_binary(BinaryKind::Div, &num, &b2)?;
                let gb = tensor::apply_unary(UnaryKind::Neg, &frac)?;
                Ok((ga, gb))
            }
        }
    }
}
