//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients for every node that depends on a trainable input. Time
//! derivatives of the schedule are obtained by propagating [`Jet`]s (value,
//! first and second derivative) through ordinary tape operations, so
//! parameter gradients of those derivatives come out of the same backward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{CvdmError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Padding, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Sigmoid(usize),
    SumAll(usize),
    ReduceTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: Padding,
    },
    ConvT2x2 {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    AvgPool2(usize),
    InstanceNorm(usize, Vec<f64>),
    Concat(Vec<usize>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An operation tape. Create one per forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that treats parameters as constants (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf whose gradient is tracked (used for input-sensitivity checks).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter; repeated requests return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                id: node,
                graph: self,
            };
        }
        let var = self.push(store.get(id).clone(), Op::Param, true);
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'_>> {
        let value = f(&self.nodes.borrow()[a].value)?;
        let rg = self.requires(&[a]);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(CvdmError::Shape(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let want = |i: usize| nodes[i].requires_grad;
            let mut contrib: Vec<(usize, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    contrib.push((*a, tensor::reduce_to(&g, val(*a).shape())));
                    contrib.push((*b, tensor::reduce_to(&g, val(*b).shape())));
                }
                Op::Sub(a, b) => {
                    contrib.push((*a, tensor::reduce_to(&g, val(*a).shape())));
                    let neg = g.map(|v| -v);
                    contrib.push((*b, tensor::reduce_to(&neg, val(*b).shape())));
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        let ga = tensor::broadcast_binary(&g, val(*b), |x, y| x * y)?;
                        contrib.push((*a, tensor::reduce_to(&ga, val(*a).shape())));
                    }
                    if want(*b) {
                        let gb = tensor::broadcast_binary(&g, val(*a), |x, y| x * y)?;
                        contrib.push((*b, tensor::reduce_to(&gb, val(*b).shape())));
                    }
                }
                Op::Div(a, b) => {
                    let ga = tensor::broadcast_binary(&g, val(*b), |x, y| x / y)?;
                    if want(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let gb = ga.zip_map(&node.value, |x, q| -x * q)?;
                        contrib.push((*b, tensor::reduce_to(&gb, val(*b).shape())));
                    }
                    contrib.push((*a, tensor::reduce_to(&ga, val(*a).shape())));
                }
                Op::Scale(a, s) => contrib.push((*a, g.map(|v| v * s))),
                Op::Offset(a) => contrib.push((*a, g)),
                Op::Exp(a) => contrib.push((*a, g.zip_map(&node.value, |x, y| x * y)?)),
                Op::Ln(a) => contrib.push((*a, g.zip_map(val(*a), |x, y| x / y)?)),
                Op::Sqrt(a) => contrib.push((*a, g.zip_map(&node.value, |x, y| 0.5 * x / y)?)),
                Op::Square(a) => contrib.push((*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)?)),
                Op::Softplus(a) => {
                    contrib.push((*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))?))
                }
                Op::Sigmoid(a) => {
                    contrib.push((*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?))
                }
                Op::SumAll(a) => contrib.push((*a, Tensor::full(val(*a).shape(), g.item()))),
                Op::ReduceTo(a) => contrib.push((*a, tensor::broadcast_to(&g, val(*a).shape())?)),
                Op::BroadcastTo(a) => contrib.push((*a, tensor::reduce_to(&g, val(*a).shape()))),
                Op::Reshape(a) => contrib.push((*a, g.reshape(val(*a).shape())?)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if want(*a) {
                        let mut ga = vec![0.0; m * k];
                        tensor::gemm(m, n, k, g.data(), n, 1, tb.data(), 1, n, &mut ga, false);
                        contrib.push((*a, Tensor::new(&[m, k], ga)?));
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; k * n];
                        tensor::gemm(k, m, n, ta.data(), 1, k, g.data(), n, 1, &mut gb, false);
                        contrib.push((*b, Tensor::new(&[k, n], gb)?));
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(val(*x), val(*w), &g, *pad, want(*x));
                    if let Some(gx) = gx {
                        contrib.push((*x, gx));
                    }
                    contrib.push((*w, gw));
                    if let Some(b) = b {
                        contrib.push((*b, gb));
                    }
                }
                Op::ConvT2x2 { x, w, b } => {
                    let (gx, gw, gb) =
                        tensor::conv_transpose2x2_backward(val(*x), val(*w), &g, want(*x));
                    if let Some(gx) = gx {
                        contrib.push((*x, gx));
                    }
                    contrib.push((*w, gw));
                    if let Some(b) = b {
                        contrib.push((*b, gb));
                    }
                }
                Op::AvgPool2(a) => {
                    contrib.push((*a, tensor::avg_pool2_backward(val(*a).shape(), &g)))
                }
                Op::InstanceNorm(a, inv_std) => contrib.push((
                    *a,
                    tensor::instance_norm_backward(&node.value, inv_std, &g),
                )),
                Op::Concat(parts, axis) => {
                    let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                    for (p, gp) in parts.iter().zip(g.split(*axis, &sizes)) {
                        contrib.push((*p, gp));
                    }
                }
            }
            for (pid, gp) in contrib {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gp.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| grads[node].clone().map(|g| (pid, g)))
            .collect();
        Ok(Gradients { params, all: grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    all: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.all.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn add(self, o: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| {
                tensor::broadcast_binary(a, b, |x, y| x + y)
            })
    }

    pub fn sub(self, o: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| {
                tensor::broadcast_binary(a, b, |x, y| x - y)
            })
    }

    pub fn mul(self, o: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| {
                tensor::broadcast_binary(a, b, |x, y| x * y)
            })
    }

    pub fn div(self, o: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary(self.id, o.id, Op::Div(self.id, o.id), |a, b| {
                tensor::broadcast_binary(a, b, |x, y| x / y)
            })
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Scale(self.id, s), |a| Ok(a.map(|v| v * s)))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    /// `self + c` for a constant `c`.
    pub fn offset(self, c: f64) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Offset(self.id), |a| Ok(a.map(|v| v + c)))
    }

    /// `c - self`.
    pub fn rsub(self, c: f64) -> Result<Var<'g>> {
        self.scale(-1.0)?.offset(c)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.graph.unary(self.id, Op::Ln(self.id), |a| Ok(a.map(f64::ln)))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Sqrt(self.id), |a| Ok(a.map(f64::sqrt)))
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Square(self.id), |a| Ok(a.map(|v| v * v)))
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Softplus(self.id), |a| Ok(a.map(softplus)))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Sigmoid(self.id), |a| Ok(a.map(sigmoid)))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::SumAll(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.with_value(|t| t.numel()) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums over broadcast axes down to `shape` (keeps rank).
    pub fn reduce_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let shape = shape.to_vec();
        self.graph.unary(self.id, Op::ReduceTo(self.id), move |a| {
            tensor::broadcast_shape(&shape, a.shape())?;
            Ok(tensor::reduce_to(a, &shape))
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::BroadcastTo(self.id), |a| tensor::broadcast_to(a, shape))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::Reshape(self.id), |a| a.reshape(shape))
    }

    pub fn matmul(self, o: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary(self.id, o.id, Op::MatMul(self.id, o.id), tensor::matmul)
    }

    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, pad: Padding) -> Result<Var<'g>> {
        let g = self.graph;
        let value = {
            let nodes = g.nodes.borrow();
            tensor::conv2d(
                &nodes[self.id].value,
                &nodes[w.id].value,
                b.map(|b| &nodes[b.id].value),
                pad,
            )?
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = g.requires(&ids);
        Ok(g.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                pad,
            },
            rg,
        ))
    }

    pub fn conv_transpose2x2(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let g = self.graph;
        let value = {
            let nodes = g.nodes.borrow();
            tensor::conv_transpose2x2(
                &nodes[self.id].value,
                &nodes[w.id].value,
                b.map(|b| &nodes[b.id].value),
            )?
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = g.requires(&ids);
        Ok(g.push(
            value,
            Op::ConvT2x2 {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn avg_pool2(self) -> Result<Var<'g>> {
        self.graph
            .unary(self.id, Op::AvgPool2(self.id), tensor::avg_pool2)
    }

    pub fn instance_norm(self) -> Result<Var<'g>> {
        let (value, inv_std) = tensor::instance_norm(&self.graph.nodes.borrow()[self.id].value)?;
        let rg = self.graph.requires(&[self.id]);
        Ok(self
            .graph
            .push(value, Op::InstanceNorm(self.id, inv_std), rg))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let g = parts
            .first()
            .ok_or_else(|| CvdmError::Shape("concat of nothing".into()))?
            .graph;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = g.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat(&refs, axis)?
        };
        let rg = g.requires(&ids);
        Ok(g.push(value, Op::Concat(ids, axis), rg))
    }
}

/// Second-order forward-mode jet `(f, df/dt, d²f/dt²)` whose components
/// live on the tape, so they remain differentiable w.r.t. parameters.
#[derive(Debug, Clone, Copy)]
pub struct Jet<'g> {
    pub v: Var<'g>,
    pub d1: Var<'g>,
    pub d2: Var<'g>,
}

impl<'g> Jet<'g> {
    /// The independent variable itself: `(t, 1, 0)`.
    pub fn variable(t: Var<'g>) -> Self {
        let g = t.graph();
        let shape = t.shape();
        Self {
            v: t,
            d1: g.constant(Tensor::ones(&shape)),
            d2: g.constant(Tensor::zeros(&shape)),
        }
    }

    /// A quantity independent of the differentiation variable.
    pub fn constant(v: Var<'g>) -> Self {
        let g = v.graph();
        let zeros = g.constant(Tensor::zeros(&v.shape()));
        Self {
            v,
            d1: zeros,
            d2: zeros,
        }
    }

    pub fn add(self, o: Jet<'g>) -> Result<Self> {
        Ok(Self {
            v: self.v.add(o.v)?,
            d1: self.d1.add(o.d1)?,
            d2: self.d2.add(o.d2)?,
        })
    }

    pub fn scale(self, s: f64) -> Result<Self> {
        Ok(Self {
            v: self.v.scale(s)?,
            d1: self.d1.scale(s)?,
            d2: self.d2.scale(s)?,
        })
    }

    pub fn offset(self, c: f64) -> Result<Self> {
        Ok(Self {
            v: self.v.offset(c)?,
            ..self
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            v: self.v.reshape(shape)?,
            d1: self.d1.reshape(shape)?,
            d2: self.d2.reshape(shape)?,
        })
    }

    /// Multiplication by a `t`-independent factor.
    pub fn mul_const(self, c: Var<'g>) -> Result<Self> {
        Ok(Self {
            v: self.v.mul(c)?,
            d1: self.d1.mul(c)?,
            d2: self.d2.mul(c)?,
        })
    }

    /// Product rule up to second order.
    pub fn mul(self, o: Jet<'g>) -> Result<Self> {
        let v = self.v.mul(o.v)?;
        let d1 = self.d1.mul(o.v)?.add(self.v.mul(o.d1)?)?;
        let cross = self.d1.mul(o.d1)?.scale(2.0)?;
        let d2 = self.d2.mul(o.v)?.add(cross)?.add(self.v.mul(o.d2)?)?;
        Ok(Self { v, d1, d2 })
    }

    /// Affine map `self · W + b` over the last axis.
    pub fn affine(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Self> {
        let mut v = self.v.matmul(w)?;
        if let Some(b) = b {
            v = v.add(b)?;
        }
        Ok(Self {
            v,
            d1: self.d1.matmul(w)?,
            d2: self.d2.matmul(w)?,
        })
    }

    /// Chain rule for an elementwise `f` given `f(v)`, `f'(v)`, `f''(v)` as vars.
    fn chain(self, f0: Var<'g>, f1: Var<'g>, f2: Var<'g>) -> Result<Self> {
        let d1 = f1.mul(self.d1)?;
        let d2 = f2.mul(self.d1.square()?)?.add(f1.mul(self.d2)?)?;
        Ok(Self { v: f0, d1, d2 })
    }

    pub fn exp(self) -> Result<Self> {
        let e = self.v.exp()?;
        self.chain(e, e, e)
    }

    pub fn sigmoid(self) -> Result<Self> {
        let s = self.v.sigmoid()?;
        let ds = s.mul(s.rsub(1.0)?)?;
        // s'' = s(1-s)(1-2s)
        let dds = ds.mul(s.scale(-2.0)?.offset(1.0)?)?;
        self.chain(s, ds, dds)
    }

    pub fn softplus(self) -> Result<Self> {
        let sp = self.v.softplus()?;
        let s = self.v.sigmoid()?;
        let ds = s.mul(s.rsub(1.0)?)?;
        self.chain(sp, s, ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementwise_chain_gradient() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let y = x.softplus().unwrap().mul(x.sigmoid().unwrap()).unwrap();
        let loss = y.exp().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        let f = |v: f64| (softplus(v) * sigmoid(v)).exp();
        for (i, &v) in [0.3, -1.2, 2.0].iter().enumerate() {
            assert!((gx.data()[i] - finite_diff(f, v)).abs() < 1e-7);
        }
    }

    #[test]
    fn broadcast_division_gradient() {
        let g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 3], |i| 1.0 + i as f64));
        let b = g.input(Tensor::new(&[2, 1], vec![2.0, 4.0]).unwrap());
        let loss = a.div(b).unwrap().square().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        // d/db sum (a/b)^2 = -2 sum a^2 / b^3
        let gb = grads.wrt(b).unwrap();
        assert!((gb.data()[0] - (-2.0 * (1.0 + 4.0 + 9.0) / 8.0)).abs() < 1e-12);
        assert!((gb.data()[1] - (-2.0 * (16.0 + 25.0 + 36.0) / 64.0)).abs() < 1e-12);
    }

    #[test]
    fn jet_of_exp_sigmoid() {
        let g = Graph::new();
        let t = g.constant(Tensor::new(&[1, 1], vec![0.4]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1], vec![1.7]).unwrap());
        let jet = Jet::variable(t).affine(w, None).unwrap().sigmoid().unwrap().exp().unwrap();
        let f = |x: f64| sigmoid(1.7 * x).exp();
        let h = 1e-4;
        let d1 = (f(0.4 + h) - f(0.4 - h)) / (2.0 * h);
        let d2 = (f(0.4 + h) - 2.0 * f(0.4) + f(0.4 - h)) / (h * h);
        assert!((jet.d1.item() - d1).abs() < 1e-8);
        assert!((jet.d2.item() - d2).abs() < 1e-6);
    }

    #[test]
    fn no_grad_graph_tracks_nothing() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::ones(&[2]));
        let g = Graph::no_grad();
        let w = g.param(&store, id);
        let loss = w.square().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(id).is_none());
    }
}
