//! Tape-based reverse-mode automatic differentiation.
//!
//! Every backward rule is expressed with ops that are themselves recorded on
//! the tape, so gradients built with `create_graph = true` can be
//! differentiated again.

mod finite_diff;
pub mod kernels;

use std::cell::{Cell, RefCell};
use std::sync::Arc;

pub use finite_diff::{finite_diff_gradient, max_relative_error, relative_error};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag plus the attributes the op needs for forward and backward.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul {
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Conv2dInputGrad {
        stride: usize,
        padding: usize,
        input_hw: (usize, usize),
    },
    Conv2dWeightGrad {
        stride: usize,
        padding: usize,
        kernel: usize,
    },
    MaxPool2d {
        window: usize,
        argmax: Arc<Vec<usize>>,
    },
    Gather {
        indices: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    ScatterAdd {
        indices: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    Relu,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Reshape {
        shape: Vec<usize>,
    },
    SumAxis {
        axis: usize,
    },
    BroadcastAxis {
        axis: usize,
        size: usize,
    },
    Sum,
    ExpandScalar {
        shape: Vec<usize>,
    },
    Square,
    Sqrt,
    /// `1 / (2y)`, defined as 0 at `y == 0`. The derivative factor of `sqrt`.
    HalfRecip,
    Exp,
    LogSoftmax,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Conv2dInputGrad { .. } => "conv2d_input_grad",
            OpKind::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::Gather { .. } => "gather",
            OpKind::ScatterAdd { .. } => "scatter_add",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Reshape { .. } => "reshape",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::BroadcastAxis { .. } => "broadcast_axis",
            OpKind::Sum => "sum",
            OpKind::ExpandScalar { .. } => "expand_scalar",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::HalfRecip => "half_recip",
            OpKind::Exp => "exp",
            OpKind::LogSoftmax => "log_softmax",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::MatMul { .. }
            | OpKind::Conv2d { .. }
            | OpKind::Conv2dInputGrad { .. }
            | OpKind::Conv2dWeightGrad { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode<T: Element> {
    pub op: OpKind,
    pub inputs: Vec<Var>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

thread_local! {
    static BACKWARD_PERTURBATION: Cell<f64> = const { Cell::new(0.0) };
}

/// Scales every matmul backward contribution by `1 + factor` on this thread.
/// Exists only so the gradient checker can prove it detects a broken rule.
#[doc(hidden)]
pub fn set_backward_perturbation(factor: f64) {
    BACKWARD_PERTURBATION.with(|p| p.set(factor));
}

fn backward_perturbation() -> f64 {
    BACKWARD_PERTURBATION.with(Cell::get)
}

/// Gradients of a scalar with respect to named parameters.
#[derive(Clone, Debug)]
pub struct GradMap<T: Element> {
    pub names: Vec<String>,
    pub grads: Vec<Tensor<T>>,
    /// Tape handles of the gradients; present when the map is differentiable.
    pub vars: Option<Vec<Var>>,
}

impl<T: Element> GradMap<T> {
    pub fn differentiable(&self) -> bool {
        self.vars.is_some()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.grads.iter())
    }

    /// Flattened concatenation of all gradients in map order.
    pub fn flatten(&self) -> Vec<T> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

/// A single computation graph. Nodes are appended in creation order, which is
/// also a topological order.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<GraphNode<T>>>,
    grad_enabled: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(GraphNode {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn node(&self, v: Var) -> GraphNode<T> {
        self.nodes.borrow()[v.0].clone()
    }

    /// Runs `f` with recording of gradient-carrying nodes switched off.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.grad_enabled.replace(false);
        let out = f();
        self.grad_enabled.set(prev);
        out
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                op.name(),
                format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        let vals: Vec<Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = forward(&op, &vals)?;
        let requires_grad = self.grad_enabled.get() && inputs.iter().any(|&v| self.requires_grad(v));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(GraphNode {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(OpKind::Conv2d { stride, padding }, &[x, w])
    }

    pub fn maxpool2d(&self, x: Var, window: usize) -> Result<Var> {
        let (argmax, _) = kernels::maxpool2d_argmax(&self.value(x), window)?;
        self.apply(
            OpKind::MaxPool2d {
                window,
                argmax: Arc::new(argmax),
            },
            &[x],
        )
    }

    pub fn gather(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.apply(
            OpKind::Gather {
                indices: Arc::new(indices),
                shape,
            },
            &[x],
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape { shape }, &[x])
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis { axis }, &[x])
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_axis(&self, x: Var, axis: usize, size: usize) -> Result<Var> {
        self.apply(OpKind::BroadcastAxis { axis, size }, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn expand_scalar(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::ExpandScalar { shape }, &[x])
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[x])
    }

    /// `sqrt(sum(x^2))` over all elements.
    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Adds a per-channel bias `b` of shape `[C]` to `x` of shape `[B, C, ...]`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} does not match input {shape:?}", self.shape(b)),
            ));
        }
        let spatial: usize = shape[2..].iter().product();
        let mut full = self.broadcast_axis(b, 0, shape[0])?;
        if shape.len() > 2 {
            full = self.broadcast_axis(full, 2, spatial)?;
            full = self.reshape(full, shape)?;
        }
        self.add(x, full)
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll_loss(&self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(log_probs);
        let (rows, classes) = match shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::shape("nll_loss", format!("expected [B, C], got {shape:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::shape(
                "nll_loss",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let idx = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
        let picked = self.gather(log_probs, idx, vec![rows])?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / rows as f64)
    }

    /// Gradients of the scalar `loss` with respect to `params`.
    ///
    /// Parameters the loss does not depend on get explicit zero gradients.
    /// With `create_graph`, the backward computation is itself recorded so
    /// the returned gradients can be differentiated again.
    pub fn backward(&self, loss: Var, params: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = loss.0 + 1;
        let needed = {
            let nodes = self.nodes.borrow();
            let mut leads = vec![false; n];
            for p in params {
                if p.0 < n && nodes[p.0].requires_grad {
                    leads[p.0] = true;
                }
            }
            for i in 0..n {
                if !leads[i] && nodes[i].requires_grad && nodes[i].inputs.iter().any(|v| leads[v.0]) {
                    leads[i] = true;
                }
            }
            let mut reach = vec![false; n];
            reach[loss.0] = true;
            for i in (0..n).rev() {
                if reach[i] && leads[i] {
                    for v in &nodes[i].inputs {
                        reach[v.0] = true;
                    }
                }
            }
            reach.iter().zip(&leads).map(|(&r, &l)| r && l).collect::<Vec<_>>()
        };

        let prev = self.grad_enabled.replace(create_graph);
        let result = self.run_backward(loss, &needed);
        self.grad_enabled.set(prev);
        let grads = result?;

        Ok(params
            .iter()
            .map(|&p| match grads.get(p.0).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(self.shape(p))),
            })
            .collect())
    }

    fn run_backward(&self, loss: Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; needed.len()];
        if !needed[loss.0] {
            return Ok(grads);
        }
        grads[loss.0] = Some(self.constant(Tensor::full(self.shape(loss), T::one())));
        for i in (0..needed.len()).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let node = &self.nodes.borrow()[i];
                (node.op.clone(), node.inputs.clone())
            };
            if matches!(op, OpKind::Leaf) {
                continue;
            }
            let wanted: Vec<bool> = inputs.iter().map(|v| needed[v.0]).collect();
            let contributions = self.vjp(&op, &inputs, Var(i), g, &wanted)?;
            for ((input, contribution), want) in inputs.iter().zip(contributions).zip(wanted) {
                let (Some(c), true) = (contribution, want) else {
                    continue;
                };
                grads[input.0] = Some(match grads[input.0] {
                    Some(existing) => self.add(existing, c)?,
                    None => c,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of one node, composed from recorded ops.
    fn vjp(&self, op: &OpKind, inputs: &[Var], out: Var, g: Var, wanted: &[bool]) -> Result<Vec<Option<Var>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        let one = |v: Result<Var>| -> Result<Vec<Option<Var>>> { Ok(vec![Some(v?)]) };
        match *op {
            OpKind::Leaf => Ok(Vec::new()),
            OpKind::MatMul { trans_a, trans_b } => {
                let (a, b) = (inputs[0], inputs[1]);
                let mut ga = None;
                let mut gb = None;
                if want(0) {
                    ga = Some(if trans_a {
                        self.matmul_t(b, g, trans_b, true)?
                    } else {
                        self.matmul_t(g, b, false, !trans_b)?
                    });
                }
                if want(1) {
                    gb = Some(if trans_b {
                        self.matmul_t(g, a, true, trans_a)?
                    } else {
                        self.matmul_t(a, g, !trans_a, false)?
                    });
                }
                let eps = backward_perturbation();
                if eps != 0.0 {
                    ga = ga.map(|v| self.scale(v, 1.0 + eps)).transpose()?;
                    gb = gb.map(|v| self.scale(v, 1.0 + eps)).transpose()?;
                }
                Ok(vec![ga, gb])
            }
            OpKind::Conv2d { stride, padding } => {
                let (x, w) = (inputs[0], inputs[1]);
                let xs = self.shape(x);
                let k = self.shape(w)[2];
                let gx = want(0)
                    .then(|| {
                        self.apply(
                            OpKind::Conv2dInputGrad {
                                stride,
                                padding,
                                input_hw: (xs[2], xs[3]),
                            },
                            &[g, w],
                        )
                    })
                    .transpose()?;
                let gw = want(1)
                    .then(|| {
                        self.apply(
                            OpKind::Conv2dWeightGrad {
                                stride,
                                padding,
                                kernel: k,
                            },
                            &[x, g],
                        )
                    })
                    .transpose()?;
                Ok(vec![gx, gw])
            }
            OpKind::Conv2dInputGrad { stride, padding, .. } => {
                // z = input_grad(gy, w); adjoint in gy is conv, in w is weight_grad(gz, gy).
                let (gy, w) = (inputs[0], inputs[1]);
                let k = self.shape(w)[2];
                let d_gy = want(0).then(|| self.conv2d(g, w, stride, padding)).transpose()?;
                let d_w = want(1)
                    .then(|| {
                        self.apply(
                            OpKind::Conv2dWeightGrad {
                                stride,
                                padding,
                                kernel: k,
                            },
                            &[g, gy],
                        )
                    })
                    .transpose()?;
                Ok(vec![d_gy, d_w])
            }
            OpKind::Conv2dWeightGrad { stride, padding, .. } => {
                // z = weight_grad(x, gy); adjoint in x is input_grad(gy, gz), in gy is conv(x, gz).
                let (x, gy) = (inputs[0], inputs[1]);
                let xs = self.shape(x);
                let d_x = want(0)
                    .then(|| {
                        self.apply(
                            OpKind::Conv2dInputGrad {
                                stride,
                                padding,
                                input_hw: (xs[2], xs[3]),
                            },
                            &[gy, g],
                        )
                    })
                    .transpose()?;
                let d_gy = want(1).then(|| self.conv2d(x, g, stride, padding)).transpose()?;
                Ok(vec![d_x, d_gy])
            }
            OpKind::MaxPool2d { ref argmax, .. } => one(self.apply(
                OpKind::ScatterAdd {
                    indices: Arc::clone(argmax),
                    shape: self.shape(inputs[0]),
                },
                &[g],
            )),
            OpKind::Gather { ref indices, .. } => one(self.apply(
                OpKind::ScatterAdd {
                    indices: Arc::clone(indices),
                    shape: self.shape(inputs[0]),
                },
                &[g],
            )),
            OpKind::ScatterAdd { ref indices, .. } => one(self.apply(
                OpKind::Gather {
                    indices: Arc::clone(indices),
                    shape: self.shape(inputs[0]),
                },
                &[g],
            )),
            OpKind::Relu => {
                let mask = self
                    .value(out)
                    .map(|v| if v > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                one(self.mul(g, mask))
            }
            OpKind::Add => Ok(vec![Some(g), Some(g)]),
            OpKind::Sub => {
                let gb = want(1).then(|| self.scale(g, -1.0)).transpose()?;
                Ok(vec![Some(g), gb])
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = want(0).then(|| self.mul(g, b)).transpose()?;
                let gb = want(1).then(|| self.mul(g, a)).transpose()?;
                Ok(vec![ga, gb])
            }
            OpKind::Div => {
                let b = inputs[1];
                let ga = want(0).then(|| self.div(g, b)).transpose()?;
                let gb = if want(1) {
                    let gz = self.mul(g, out)?;
                    let t = self.div(gz, b)?;
                    Some(self.scale(t, -1.0)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            OpKind::Scale(c) => one(self.scale(g, c)),
            OpKind::Reshape { .. } => one(self.reshape(g, self.shape(inputs[0]))),
            OpKind::SumAxis { axis } => {
                let size = self.shape(inputs[0])[axis];
                one(self.broadcast_axis(g, axis, size))
            }
            OpKind::BroadcastAxis { axis, .. } => one(self.sum_axis(g, axis)),
            OpKind::Sum => one(self.expand_scalar(g, self.shape(inputs[0]))),
            OpKind::ExpandScalar { .. } => {
                let s = self.sum(g)?;
                one(self.reshape(s, self.shape(inputs[0])))
            }
            OpKind::Square => {
                let twice = self.scale(inputs[0], 2.0)?;
                one(self.mul(g, twice))
            }
            OpKind::Sqrt => {
                let factor = self.apply(OpKind::HalfRecip, &[out])?;
                one(self.mul(g, factor))
            }
            OpKind::HalfRecip => {
                // d/dy 1/(2y) = -2 * (1/(2y))^2
                let sq = self.square(out)?;
                let factor = self.scale(sq, -2.0)?;
                one(self.mul(g, factor))
            }
            OpKind::Exp => one(self.mul(g, out)),
            OpKind::LogSoftmax => {
                let classes = self.shape(out)[1];
                let p = self.exp(out)?;
                let row = self.sum_axis(g, 1)?;
                let row = self.broadcast_axis(row, 1, classes)?;
                let t = self.mul(p, row)?;
                one(self.sub(g, t))
            }
        }
    }

    /// `backward` packaged as a [`GradMap`] over named parameters.
    pub fn grad_map(&self, loss: Var, params: &[(String, Var)], retain_graph: bool) -> Result<GradMap<T>> {
        let vars: Vec<Var> = params.iter().map(|(_, v)| *v).collect();
        let grads = self.backward(loss, &vars, retain_graph)?;
        Ok(GradMap {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            grads: grads.iter().map(|&g| self.value(g)).collect(),
            vars: retain_graph.then_some(grads),
        })
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn forward<T: Element>(op: &OpKind, x: &[Tensor<T>]) -> Result<Tensor<T>> {
    Ok(match op {
        OpKind::Leaf => unreachable!("leaves are created directly"),
        OpKind::MatMul { trans_a, trans_b } => kernels::matmul(&x[0], &x[1], *trans_a, *trans_b)?,
        OpKind::Conv2d { stride, padding } => kernels::conv2d(&x[0], &x[1], *stride, *padding)?,
        OpKind::Conv2dInputGrad {
            stride,
            padding,
            input_hw,
        } => kernels::conv2d_input_grad(&x[0], &x[1], *stride, *padding, *input_hw)?,
        OpKind::Conv2dWeightGrad {
            stride,
            padding,
            kernel,
        } => kernels::conv2d_weight_grad(&x[0], &x[1], *stride, *padding, *kernel)?,
        OpKind::MaxPool2d { window, argmax } => {
            let [b, c, h, w] = match *x[0].shape() {
                [b, c, h, w] => [b, c, h, w],
                ref s => return Err(Error::shape("maxpool2d", format!("expected rank 4, got {s:?}"))),
            };
            kernels::gather(&x[0], argmax, &[b, c, h / window, w / window])?
        }
        OpKind::Gather { indices, shape } => {
            if indices.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(
                    "gather",
                    format!("{} indices for output shape {shape:?}", indices.len()),
                ));
            }
            kernels::gather(&x[0], indices, shape)?
        }
        OpKind::ScatterAdd { indices, shape } => kernels::scatter_add(&x[0], indices, shape)?,
        OpKind::Relu => x[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        OpKind::Add => {
            same_shape("add", &x[0], &x[1])?;
            x[0].zip_map(&x[1], |a, b| a + b)
        }
        OpKind::Sub => {
            same_shape("sub", &x[0], &x[1])?;
            x[0].zip_map(&x[1], |a, b| a - b)
        }
        OpKind::Mul => {
            same_shape("mul", &x[0], &x[1])?;
            x[0].zip_map(&x[1], |a, b| a * b)
        }
        OpKind::Div => {
            same_shape("div", &x[0], &x[1])?;
            x[0].zip_map(&x[1], |a, b| a / b)
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            x[0].map(|v| v * c)
        }
        OpKind::Reshape { shape } => x[0].reshape(shape.clone())?,
        OpKind::SumAxis { axis } => kernels::sum_axis(&x[0], *axis)?,
        OpKind::BroadcastAxis { axis, size } => kernels::broadcast_axis(&x[0], *axis, *size)?,
        OpKind::Sum => Tensor::scalar(x[0].data().iter().copied().sum()),
        OpKind::ExpandScalar { shape } => {
            if x[0].len() != 1 {
                return Err(Error::shape(
                    "expand_scalar",
                    format!("input must hold one value, got {:?}", x[0].shape()),
                ));
            }
            Tensor::full(shape.clone(), x[0].item())
        }
        OpKind::Square => x[0].map(|v| v * v),
        OpKind::Sqrt => x[0].map(T::sqrt),
        OpKind::HalfRecip => {
            let half = T::of(0.5);
            x[0].map(|v| if v == T::zero() { T::zero() } else { half / v })
        }
        OpKind::Exp => x[0].map(T::exp),
        OpKind::LogSoftmax => kernels::log_softmax(&x[0])?,
    })
}
