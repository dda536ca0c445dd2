//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products. Only nodes that depend on a
//! parameter leaf receive adjoints.
//!
//! ```
//! use msam::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let p = tape.param("p", Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.square(p);
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param("p").unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::BTreeMap;

use super::ops;
use super::{axis_split, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Scale(Var, T),
    Shift(Var, T),
    /// `min(x, max)`; the gradient passes where `x <= max`.
    ClampMax(Var, T),
    Matmul(Var, Var),
    TransposeLast(Var),
    Reshape(Var, Vec<usize>),
    SumAxis(Var, usize, bool),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
///
/// One forward/backward pass owns one tape; independent evaluations use
/// independent tapes.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Gradient of a named parameter.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// All parameter gradients keyed by name, in name order.
    pub fn by_name(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(n, &v)| (n.clone(), self.wrt(v)))
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf. Names must be unique on a tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "parameter {name} registered twice"
        );
        let v = self.leaf(value, true);
        self.params.insert(name, v);
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unary(&mut self, op: Op<T>) -> Var {
        self.push(op).expect("elementwise unary ops cannot fail")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push_unary(Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push_unary(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push_unary(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push_unary(Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push_unary(Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push_unary(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push_unary(Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.push_unary(Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: T) -> Var {
        self.push_unary(Op::Shift(a, c))
    }

    pub fn clamp_max(&mut self, a: Var, max: T) -> Var {
        self.push_unary(Op::ClampMax(a, max))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul(a, b))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        self.push(Op::TransposeLast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.push(Op::Reshape(a, shape.into()))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.push(Op::SumAxis(a, axis, keepdim))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push_unary(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.push_unary(Op::MeanAll(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::LogSoftmax(a, axis))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        self.push(Op::L2Normalize(a, axis, eps))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        })
    }

    /// `x · W + b` over the last axis of `x` (any leading shape).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::shape("linear", &shape, &[]))?;
        let rows = shape.iter().product::<usize>() / d_in;
        let flat = self.reshape(x, [rows, d_in])?;
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let d_out = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(y, out_shape)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => ops::add(&acc, &contrib)?,
                    None => contrib,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    /// Vector-Jacobian products of node `i` given its output adjoint `g`.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let one = T::one();
        let out = match node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((a, ops::sum_to_shape(g, val(a).shape())?));
                }
                if needs(b) {
                    out.push((b, ops::sum_to_shape(g, val(b).shape())?));
                }
                out
            }
            Op::Sub(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((a, ops::sum_to_shape(g, val(a).shape())?));
                }
                if needs(b) {
                    out.push((b, ops::sum_to_shape(&g.map(|x| -x), val(b).shape())?));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((a, ops::sum_to_shape(&ops::mul(g, val(b))?, val(a).shape())?));
                }
                if needs(b) {
                    out.push((b, ops::sum_to_shape(&ops::mul(g, val(a))?, val(b).shape())?));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((a, ops::sum_to_shape(&ops::div(g, val(b))?, val(a).shape())?));
                }
                if needs(b) {
                    // d(a/b)/db = -y / b
                    let gb = ops::mul(g, &ops::div(y, val(b))?)?.map(|x| -x);
                    out.push((b, ops::sum_to_shape(&gb, val(b).shape())?));
                }
                out
            }
            Op::Neg(a) => vec![(a, g.map(|x| -x))],
            Op::Exp(a) => vec![(a, ops::mul(g, y)?)],
            Op::Log(a) => vec![(a, ops::div(g, val(a))?)],
            Op::Sqrt(a) => {
                // subgradient 0 at the kink sqrt(0)
                let half = T::c(0.5);
                let d = y.map(|s| if s > T::zero() { half / s } else { T::zero() });
                vec![(a, ops::mul(g, &d)?)]
            }
            Op::Square(a) => vec![(a, ops::broadcast_binary(g, val(a), |gi, x| gi * (x + x))?)],
            Op::Sigmoid(a) => vec![(a, ops::broadcast_binary(g, y, |gi, s| gi * s * (one - s))?)],
            Op::Softplus(a) => vec![(
                a,
                ops::broadcast_binary(g, val(a), |gi, x| gi * ops::sigmoid_scalar(x))?,
            )],
            Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
            Op::Shift(a, _) => vec![(a, g.clone())],
            Op::ClampMax(a, max) => vec![(
                a,
                ops::broadcast_binary(g, val(a), |gi, x| if x <= max { gi } else { T::zero() })?,
            )],
            Op::Matmul(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    let bt = ops::transpose_last(val(b))?;
                    out.push((a, ops::matmul(g, &bt)?));
                }
                if needs(b) {
                    let at = ops::transpose_last(val(a))?;
                    out.push((b, ops::matmul(&at, g)?));
                }
                out
            }
            Op::TransposeLast(a) => vec![(a, ops::transpose_last(g)?)],
            Op::Reshape(a, _) => vec![(a, g.reshape(val(a).shape().to_vec())?)],
            Op::SumAxis(a, axis, _) => {
                let mut kept = val(a).shape().to_vec();
                kept[axis] = 1;
                let g = g.reshape(kept)?;
                vec![(a, ops::broadcast_to(&g, val(a).shape())?)]
            }
            Op::SumAll(a) => vec![(a, Tensor::full(val(a).shape().to_vec(), g.data()[0]))],
            Op::MeanAll(a) => {
                let n = T::c(val(a).len() as f64);
                vec![(a, Tensor::full(val(a).shape().to_vec(), g.data()[0] / n))]
            }
            Op::Softmax(a, axis) => {
                // gx = y ⊙ (g − Σ_axis g⊙y)
                let gy = ops::mul(g, y)?;
                let s = ops::sum_axis(&gy, axis, true)?;
                let inner = ops::sub(g, &s)?;
                vec![(a, ops::mul(y, &inner)?)]
            }
            Op::LogSoftmax(a, axis) => {
                // gx = g − softmax(x) · Σ_axis g
                let s = ops::sum_axis(g, axis, true)?;
                let p = y.map(T::exp);
                vec![(a, ops::sub(g, &ops::mul(&p, &s)?)?)]
            }
            Op::L2Normalize(a, axis, eps) => vec![(a, l2_normalize_vjp(val(a), y, g, axis, eps)?)],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (gx, gg, gb) = layer_norm_vjp(val(x), val(gamma), g, eps)?;
                let mut out = Vec::new();
                if needs(x) {
                    out.push((x, gx));
                }
                if needs(gamma) {
                    out.push((gamma, gg));
                }
                if needs(beta) {
                    out.push((beta, gb));
                }
                out
            }
        };
        Ok(out)
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![a, b]
        }
        Op::Neg(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Scale(a, _)
        | Op::Shift(a, _)
        | Op::ClampMax(a, _)
        | Op::TransposeLast(a)
        | Op::Reshape(a, _)
        | Op::SumAxis(a, _, _)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a, _)
        | Op::L2Normalize(a, _, _) => vec![a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
    }
}

/// Forward kernel for one op. Shared by recording and replay.
fn eval<'a, T: Real>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => ops::add(val(a), val(b))?,
        Op::Sub(a, b) => ops::sub(val(a), val(b))?,
        Op::Mul(a, b) => ops::mul(val(a), val(b))?,
        Op::Div(a, b) => ops::div(val(a), val(b))?,
        Op::Neg(a) => val(a).map(|x| -x),
        Op::Exp(a) => val(a).map(T::exp),
        Op::Log(a) => val(a).map(T::ln),
        Op::Sqrt(a) => val(a).map(T::sqrt),
        Op::Square(a) => val(a).map(|x| x * x),
        Op::Sigmoid(a) => ops::sigmoid(val(a)),
        Op::Softplus(a) => ops::softplus(val(a)),
        Op::Scale(a, c) => val(a).map(|x| x * c),
        Op::Shift(a, c) => val(a).map(|x| x + c),
        Op::ClampMax(a, m) => val(a).map(|x| x.min(m)),
        Op::Matmul(a, b) => ops::matmul(val(a), val(b))?,
        Op::TransposeLast(a) => ops::transpose_last(val(a))?,
        Op::Reshape(a, ref shape) => val(a).reshape(shape.clone())?,
        Op::SumAxis(a, axis, keepdim) => ops::sum_axis(val(a), axis, keepdim)?,
        Op::SumAll(a) => Tensor::scalar(val(a).sum()),
        Op::MeanAll(a) => {
            let x = val(a);
            Tensor::scalar(x.sum() / T::c(x.len() as f64))
        }
        Op::Softmax(a, axis) => ops::softmax(val(a), axis)?,
        Op::LogSoftmax(a, axis) => ops::log_softmax(val(a), axis)?,
        Op::L2Normalize(a, axis, eps) => ops::l2_normalize(val(a), axis, eps)?,
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => ops::layer_norm(val(x), val(gamma), val(beta), eps)?,
    })
}

fn l2_normalize_vjp<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for n in 0..inner {
            let at = |i: usize| (o * len + i) * inner + n;
            let norm = (0..len).map(|i| xd[at(i)] * xd[at(i)]).sum::<T>().sqrt();
            if norm > eps {
                let yg = (0..len).map(|i| yd[at(i)] * gd[at(i)]).sum::<T>();
                for i in 0..len {
                    out[at(i)] = (gd[at(i)] - yd[at(i)] * yg) / norm;
                }
            } else {
                for i in 0..len {
                    out[at(i)] = gd[at(i)] / eps;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layer_norm_vjp<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = gamma.len();
    let n = T::c(d as f64);
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for (row, grow) in x.data().chunks(d).zip(g.data().chunks(d)) {
        let (mean, inv_std) = ops::row_moments(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            gxhat[j] = grow[j] * gamma.data()[j];
            gg[j] = gg[j] + grow[j] * xhat[j];
            gb[j] = gb[j] + grow[j];
        }
        let mean_g = gxhat.iter().copied().sum::<T>() / n;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..d {
            gx.push(inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx));
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new([d], gg)?,
        Tensor::new([d], gb)?,
    ))
}
