use super::ops::{self, Elementwise};
use super::{ParamId, ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    NearestUpsample {
        input: Var,
        factor: usize,
    },
    Elementwise {
        a: Var,
        b: Var,
        kind: Elementwise,
    },
    ScaleAdd {
        a: Var,
        alpha: f64,
        b: Var,
        beta: f64,
    },
    ConcatChannels(Var, Var),
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Sum(Var),
    L1Loss {
        pred: Var,
        target: Tensor,
    },
    L2Loss {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the tape backwards is
/// a valid reverse topological order. A fresh graph is built for every
/// forward pass.
///
/// Calling [`backward`](Graph::backward) more than once adds the new
/// gradients onto the ones already held by the graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf that receives gradients but is not tied to a parameter.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Records parameter `id` of `store` as a gradient-receiving leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable, "param")?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            1,
            padding,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxChannels(x), rg, "softmax")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { input, weight, bias }, rg, "linear")
    }

    pub fn nearest_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::nearest_upsample(self.value(input), factor)?;
        let rg = self.rg(input);
        self.push(out, Op::NearestUpsample { input, factor }, rg, "nearest_upsample")
    }

    fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        // the broadcast operand goes second
        let (a, b) = if self.shape(a).numel() < self.shape(b).numel() {
            (b, a)
        } else {
            (a, b)
        };
        let out = ops::elementwise(self.value(a), self.value(b), kind)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Elementwise { a, b, kind }, rg, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn scale_add(&mut self, a: Var, alpha: f64, b: Var, beta: f64) -> Result<Var> {
        let out = ops::scale_add(self.value(a), alpha, self.value(b), beta)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ScaleAdd { a, alpha, b, beta }, rg, "scale_add")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatChannels(a, b), rg, "concat")
    }

    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let out = ops::select_channel(self.value(input), channel)?;
        let rg = self.rg(input);
        self.push(out, Op::SelectChannel { input, channel }, rg, "select_channel")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let out = Tensor::scalar(ops::l1_loss(self.value(pred), target)?);
        let rg = self.rg(pred);
        self.push(
            out,
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
            rg,
            "l1_loss",
        )
    }

    pub fn l2_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let out = Tensor::scalar(ops::l2_loss(self.value(pred), target)?);
        let rg = self.rg(pred);
        self.push(
            out,
            Op::L2Loss {
                pred,
                target: target.clone(),
            },
            rg,
            "l2_loss",
        )
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut pass: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (target, grad) in self.local_grads(&node.op, &node.value, &g)? {
                accumulate(&mut pass[target.0], grad);
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }

    /// Gradients flowing from node output gradient `g` into the node inputs
    /// that require them.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let grads = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    *padding,
                    g,
                    self.rg(*input),
                )?;
                if let Some(dx) = grads.input {
                    res.push((*input, dx));
                }
                if self.rg(*weight) {
                    res.push((*weight, grads.weight));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    if self.rg(*b) {
                        let shape = self.shape(*b);
                        res.push((*b, Tensor::from_raw(shape, db.into_data())));
                    }
                }
            }
            Op::Relu(x) => res.push((*x, ops::relu_backward(self.value(*x), g))),
            Op::Sigmoid(x) => res.push((*x, ops::sigmoid_backward(out, g))),
            Op::SoftmaxChannels(x) => res.push((*x, ops::softmax_channels_backward(out, g))),
            Op::GlobalAvgPool(x) => {
                res.push((*x, ops::global_avg_pool_backward(self.shape(*x), g)))
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let grads = ops::linear_backward(self.value(*input), self.value(*weight), g)?;
                if self.rg(*input) {
                    res.push((*input, grads.input));
                }
                if self.rg(*weight) {
                    res.push((*weight, grads.weight));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let shape = self.shape(*b);
                        res.push((*b, Tensor::from_raw(shape, grads.bias.into_data())));
                    }
                }
            }
            Op::NearestUpsample { input, factor } => res.push((
                *input,
                ops::nearest_upsample_backward(self.shape(*input), *factor, g),
            )),
            Op::Elementwise { a, b, kind } => {
                let (da, db) = ops::elementwise_backward(self.value(*a), self.value(*b), *kind, g)?;
                if self.rg(*a) {
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    res.push((*b, db));
                }
            }
            Op::ScaleAdd { a, alpha, b, beta } => {
                if self.rg(*a) {
                    res.push((*a, g.map(|v| alpha * v)));
                }
                if self.rg(*b) {
                    res.push((*b, g.map(|v| beta * v)));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (da, db) = ops::concat_channels_backward(self.shape(*a), self.shape(*b), g);
                if self.rg(*a) {
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    res.push((*b, db));
                }
            }
            Op::SelectChannel { input, channel } => res.push((
                *input,
                ops::select_channel_backward(self.shape(*input), *channel, g),
            )),
            Op::Sum(x) => {
                let gv = g.data()[0];
                res.push((*x, Tensor::full(self.shape(*x), gv)));
            }
            Op::L1Loss { pred, target } => res.push((
                *pred,
                ops::l1_loss_backward(self.value(*pred), target, g.data()[0]),
            )),
            Op::L2Loss { pred, target } => res.push((
                *pred,
                ops::l2_loss_backward(self.value(*pred), target, g.data()[0]),
            )),
        }
        res.retain(|(v, _)| self.rg(*v));
        Ok(res)
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::new(1, 2, 3, 3), 0.4)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        let y = g.sigmoid(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::new(1, 1, 1, 2), 1.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(Shape::new(1, 1, 1, 2))).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 2.0)).unwrap();
        let x = g.variable(Tensor::full(Shape::new(1, 1, 1, 2), 3.0)).unwrap();
        let m = g.mul(c, x).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn param_grads_flow_to_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(Shape::new(1, 1, 1, 1), 3.0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.5)).unwrap();
        let wv = g.param(&store, w).unwrap();
        let y = g.conv2d(x, wv, None, 0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[2.0]);
    }
}
