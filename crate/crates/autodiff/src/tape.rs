//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node whose
//! inputs are earlier nodes, so the recording order is already a topological
//! order and [`Tape::backward`] simply walks it in reverse.

use std::cell::{Ref, RefCell};

use crate::conv::{self, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    BroadcastTo(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    Reparameterize {
        mu: usize,
        logvar: usize,
        noise: Tensor,
    },
    BceWithLogits {
        logits: usize,
        targets: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } | ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Reparameterize { mu, logvar, .. } => vec![*mu, *logvar],
            Concat { srcs, .. } => srcs.clone(),
            Scale(a, _) | AddScalar(a) | Transpose(a) | Reshape(a) | Relu(a) | Sigmoid(a)
            | Exp(a) | Log(a) | Square(a) | Sqrt(a) | Sum(a) | Mean(a) | BroadcastTo(a) => vec![*a],
            Slice { src, .. } => vec![*src],
            BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var<'_>> {
        let value = value.check_finite(name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn owns(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Gradient of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.owns(loss)?;
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[root].value.shape();
        if nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::from_parts(loss_shape.to_vec(), vec![1.0]));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut push = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    push(*a, g.reduce_to(val(*a).shape()));
                    push(*b, g.reduce_to(val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    push(*a, g.reduce_to(val(*a).shape()));
                    push(*b, g.reduce_to(val(*b).shape()).scale(-1.0));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        push(*a, g.mul(val(*b))?.reduce_to(val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        push(*b, g.mul(val(*a))?.reduce_to(val(*b).shape()));
                    }
                }
                Op::Scale(a, s) => push(*a, g.scale(*s)),
                Op::AddScalar(a) => push(*a, g),
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = if *trans_a {
                            bv.matmul_ex(*trans_b, &g, true)?
                        } else {
                            g.matmul_ex(false, bv, !*trans_b)?
                        };
                        push(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = if *trans_b {
                            g.matmul_ex(true, av, *trans_a)?
                        } else {
                            av.matmul_ex(!*trans_a, &g, false)?
                        };
                        push(*b, gb);
                    }
                }
                Op::Transpose(a) => push(*a, g.transpose()?),
                Op::Reshape(a) => push(*a, g.reshape(val(*a).shape())?),
                Op::Slice { src, axis, start } => {
                    let mut full = Tensor::zeros(val(*src).shape())?;
                    full.add_into_slice(&g, *axis, *start);
                    push(*src, full);
                }
                Op::Concat { srcs, axis } => {
                    let mut start = 0;
                    for &s in srcs {
                        let len = val(s).shape()[*axis];
                        if nodes[s].requires_grad {
                            push(s, g.slice_axis(*axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    push(*a, g.zip_broadcast(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?);
                }
                Op::Sigmoid(a) => {
                    push(*a, g.zip_broadcast(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?);
                }
                Op::Exp(a) => push(*a, g.mul(&node.value)?),
                Op::Log(a) => push(*a, g.zip_broadcast(val(*a), "log", |g, x| g / x)?),
                Op::Square(a) => push(*a, g.zip_broadcast(val(*a), "square", |g, x| 2.0 * g * x)?),
                Op::Sqrt(a) => {
                    push(*a, g.zip_broadcast(&node.value, "sqrt", |g, y| 0.5 * g / y)?);
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    push(*a, Tensor::full(val(*a).shape(), gv)?);
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    push(*a, Tensor::full(val(*a).shape(), g.item()? / n)?);
                }
                Op::BroadcastTo(a) => push(*a, g.reduce_to(val(*a).shape())),
                Op::Conv2d { x, w, geom } => {
                    let (gx, gw) = conv::conv2d_backward(val(*x), val(*w), &g, *geom)?;
                    push(*x, gx);
                    push(*w, gw);
                }
                Op::ConvTranspose2d { x, w, geom } => {
                    let (gx, gw) = conv::conv_transpose2d_backward(val(*x), val(*w), &g, *geom)?;
                    push(*x, gx);
                    push(*w, gw);
                }
                Op::Reparameterize { mu, logvar, noise } => {
                    push(*mu, g.reduce_to(val(*mu).shape()));
                    let lv = val(*logvar);
                    let d = Tensor::from_parts(
                        lv.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(lv.data())
                            .zip(noise.data())
                            .map(|((g, l), e)| g * e * 0.5 * (0.5 * l).exp())
                            .collect(),
                    );
                    push(*logvar, d);
                }
                Op::BceWithLogits { logits, targets } => {
                    let l = val(*logits);
                    let d = Tensor::from_parts(
                        l.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(l.data())
                            .zip(targets.data())
                            .map(|((g, l), t)| g * (sigmoid(*l) - t))
                            .collect(),
                    );
                    push(*logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise binary cross-entropy against logits, stable for large |logit|.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(v.shape(), vec![0.0; v.value().len()]),
        }
    }

    /// Gradient for `v` if any flowed to it.
    pub fn try_get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let out = f(&self.value())?;
        self.tape.record(op, out, name)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let b = self.tape.owns(rhs)?;
        let out = f(&self.value(), &rhs.value())?;
        self.tape.record(op(self.id, b), out, name)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add, |a, b| a.add(b))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a.sub(b))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a.mul(b))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, s), |a| Ok(a.scale(s)))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |a| Ok(a.map(|v| v + c)))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(false, rhs, false)
    }

    /// `op(self) * op(rhs)` with optional transposes, without materialising them.
    pub fn matmul_ex(self, trans_a: bool, rhs: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.binary(
            rhs,
            "matmul",
            |a, b| Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            |a, b| a.matmul_ex(trans_a, b, trans_b),
        )
    }

    /// `self * w^T + b` for a weight stored as `[out, in]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(false, w, true)?.add(b)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary("transpose", Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary("reshape", Op::Reshape(self.id), |a| a.reshape(shape))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(
            "slice",
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            |a| a.slice_axis(axis, start, len),
        )
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let tape = first.tape;
        let srcs = parts.iter().map(|p| tape.owns(*p)).collect::<Result<Vec<_>>>()?;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
            Tensor::concat(&refs, axis)?
        };
        tape.record(Op::Concat { srcs, axis }, out, "concat")
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |a| Ok(a.map(|v| v.max(0.0))))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |a| Ok(a.map(sigmoid)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |a| Ok(a.map(f64::ln)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |a| Ok(a.map(|v| v * v)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt(self.id), |a| Ok(a.map(f64::sqrt)))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum_all())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(a.sum_all() / a.len() as f64))
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary("broadcast", Op::BroadcastTo(self.id), |a| a.broadcast_to(shape))
    }

    pub fn conv2d(self, w: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
        self.binary(
            w,
            "conv2d",
            |x, w| Op::Conv2d { x, w, geom },
            |x, w| conv::conv2d(x, w, geom),
        )
    }

    /// Transposed convolution with kernel laid out `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(self, w: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
        self.binary(
            w,
            "conv_transpose2d",
            |x, w| Op::ConvTranspose2d { x, w, geom },
            |x, w| conv::conv_transpose2d(x, w, geom),
        )
    }

    /// `mu + exp(0.5 * logvar) * noise`, with `noise` drawn by the caller.
    pub fn reparameterize(self, logvar: Var<'t>, noise: Tensor) -> Result<Var<'t>> {
        let lv = self.tape.owns(logvar)?;
        let out = {
            let (mu, l) = (self.value(), logvar.value());
            if mu.shape() != l.shape() || mu.shape() != noise.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "reparameterize",
                    lhs: mu.shape().to_vec(),
                    rhs: if mu.shape() != l.shape() {
                        l.shape().to_vec()
                    } else {
                        noise.shape().to_vec()
                    },
                });
            }
            Tensor::from_parts(
                mu.shape().to_vec(),
                mu.data()
                    .iter()
                    .zip(l.data())
                    .zip(noise.data())
                    .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                    .collect(),
            )
        };
        self.tape.record(
            Op::Reparameterize {
                mu: self.id,
                logvar: lv,
                noise,
            },
            out,
            "reparameterize",
        )
    }

    /// Elementwise binary cross-entropy of `sigmoid(self)` against `targets`.
    pub fn bce_with_logits(self, targets: Tensor) -> Result<Var<'t>> {
        let out = {
            let l = self.value();
            if l.shape() != targets.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_with_logits",
                    lhs: l.shape().to_vec(),
                    rhs: targets.shape().to_vec(),
                });
            }
            Tensor::from_parts(
                l.shape().to_vec(),
                l.data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&l, &t)| bce_with_logits(l, t))
                    .collect(),
            )
        };
        self.tape.record(
            Op::BceWithLogits {
                logits: self.id,
                targets,
            },
            out,
            "bce_with_logits",
        )
    }
}

/// Output shape of a broadcasting binary op.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast_shape("broadcast", a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.square().unwrap().sum().unwrap();
        assert_eq!(loss.value().item().unwrap(), 14.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sigmoid().unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 0.25);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2, 2], &[1.0; 4]));
        let loss = x.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.try_get(unused).is_none());
        assert_eq!(grads.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn log_of_negative_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        assert_eq!(x.log().unwrap_err(), TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x * x) through Mul with both operands the same node
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[3.0, -1.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0, -2.0]);
    }

    #[test]
    fn foreign_var_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        let y = b.param(Tensor::scalar(1.0));
        assert_eq!(x.add(y).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn bce_is_stable_for_saturated_logits() {
        assert!(bce_with_logits(800.0, 1.0).abs() < 1e-300);
        assert!(bce_with_logits(-800.0, 0.0).abs() < 1e-300);
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
