//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes in execution order, so the node list is already
//! topologically sorted. [`Tape::backward`] walks it once in reverse and
//! accumulates adjoints additively. Only gradients of parameter leaves are
//! returned; intermediate adjoints are dropped as soon as they are consumed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter tensor within its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Conv2d { x: Var, kernel: Var, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One gradient tensor per parameter that took part in the recorded pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientSet {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&id, t)| (id, t))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, false, "input")
    }

    /// Records a parameter leaf whose gradient `backward` reports under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push(value, Op::Param(id), true, "parameter")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::bias_add(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::BiasAdd(x, bias), rg, "bias_add")
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (out, cols) = ops::conv2d(self.value(x), self.value(kernel), true)?;
        let rg = self.rg(x) || self.rg(kernel);
        let cols = cols.unwrap_or_default();
        self.push(out, Op::Conv2d { x, kernel, cols }, rg, "conv2d")
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::max_pool2(self.value(x))?;
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg, "max_pool2")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let out = ops::flatten(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, "flatten")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * alpha);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, alpha), rg, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    /// Fused softmax + cross-entropy over `N × C` logits, mean over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "softmax_cross_entropy")
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }

        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![1.0]));
        let mut grads = GradientSet::default();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            dy.ensure_finite("backward")?;
            let send = |v: Var, g: Tensor, adj: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match grads.get_mut(*id) {
                    Some(acc) => acc.add_assign(&dy)?,
                    None => grads.insert(*id, dy),
                },
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &dy);
                    send(*a, da, &mut adj)?;
                    send(*b, db, &mut adj)?;
                }
                Op::BiasAdd(x, bias) => {
                    let db = ops::bias_add_backward(&dy, self.value(*bias).len());
                    send(*bias, db, &mut adj)?;
                    send(*x, dy, &mut adj)?;
                }
                Op::Conv2d { x, kernel, cols } => {
                    let want_dx = self.rg(*x);
                    let (dx, dk) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        cols,
                        &dy,
                        want_dx,
                    )?;
                    send(*kernel, dk, &mut adj)?;
                    if let Some(dx) = dx {
                        send(*x, dx, &mut adj)?;
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = ops::max_pool2_backward(self.value(*x).shape(), argmax, &dy);
                    send(*x, dx, &mut adj)?;
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &dy);
                    send(*x, dx, &mut adj)?;
                }
                Op::Reshape(x) => {
                    let dx = dy.reshape(self.value(*x).shape())?;
                    send(*x, dx, &mut adj)?;
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut adj)?;
                    send(*b, dy, &mut adj)?;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = Tensor::from_parts(
                        ta.shape().to_vec(),
                        dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                    let db = Tensor::from_parts(
                        tb.shape().to_vec(),
                        dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                    send(*a, da, &mut adj)?;
                    send(*b, db, &mut adj)?;
                }
                Op::Scale(x, alpha) => {
                    send(*x, dy.map(|g| g * alpha), &mut adj)?;
                }
                Op::Sum(x) => {
                    let g = dy.item()?;
                    send(*x, Tensor::full(self.value(*x).shape(), g), &mut adj)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let g = ops::softmax_cross_entropy_backward(probs, labels, dy.item()?);
                    send(*logits, g, &mut adj)?;
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_w() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::scalar(3.0)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn uniform_logits_gradient() {
        // logits = 0 · W so every logit is zero regardless of the input
        let (batch, classes) = (4, 5);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[batch, 3], 1.0)).unwrap();
        let w = tape.param(ParamId(0), Tensor::zeros(&[3, classes])).unwrap();
        let b = tape.param(ParamId(1), Tensor::zeros(&[classes])).unwrap();
        let z = tape.matmul(x, w).unwrap();
        let logits = tape.bias_add(z, b).unwrap();
        let labels = [0, 2, 2, 4];
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dL/db_j sums (1/C - 1[j = label]) / batch over the batch
        let db = grads.get(ParamId(1)).unwrap();
        for j in 0..classes {
            let hits = labels.iter().filter(|&&l| l == j).count() as f64;
            let expected = (batch as f64 / classes as f64 - hits) / batch as f64;
            assert!((db.data()[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn per_logit_gradient_of_uniform_softmax() {
        let mut tape = Tape::new();
        let z = tape.param(ParamId(0), Tensor::zeros(&[2, 4])).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[1, 3]).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(ParamId(0)).unwrap().data().to_vec();
        for (i, label) in [1usize, 3].iter().enumerate() {
            for j in 0..4 {
                let onehot = if j == *label { 1.0 } else { 0.0 };
                assert_eq!(g[i * 4 + j], (0.25 - onehot) / 2.0);
            }
        }
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // L = sum(w) + sum(w) → dL/dw = 2
        let mut tape = Tape::new();
        let w = tape.param(ParamId(7), Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let s1 = tape.sum(w).unwrap();
        let s2 = tape.sum(w).unwrap();
        let l = tape.add(s1, s2).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(7)).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::scalar(1e300)).unwrap();
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2.0])).unwrap();
        let w = tape.param(ParamId(0), Tensor::from_vec(vec![5.0])).unwrap();
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0]);
    }
}
