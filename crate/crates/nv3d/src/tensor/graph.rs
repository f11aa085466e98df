//! Define-by-run reverse-mode differentiation on a flat tape.
//!
//! Every builder call evaluates its result immediately and appends a node, so
//! node indices are already a topological order and the backward pass is a
//! single reverse sweep. Gradients only flow into subgraphs that can reach a
//! named parameter; everything else is pruned via the `requires_grad` flag.

use std::collections::BTreeMap;

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    /// Named parameter (gradient target) or unnamed constant input.
    Leaf { name: Option<String> },
    /// Identity in the forward pass, gradient barrier in the backward pass.
    Detach {
        #[allow(dead_code)] // kept so graph dumps show where the value came from
        input: NodeId,
    },
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Gelu { input: NodeId },
    Upsample2x { input: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    MeanBatch { inputs: Vec<NodeId>, weights: Vec<f64> },
    IntensityDiff { input: NodeId },
    SmoothL1 { pred: NodeId, target: Tensor<T> },
    CubicL1 { pred: NodeId, target: Tensor<T> },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that receives a gradient, addressable by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            value,
            true,
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { name: None }, value, false)
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).clone();
        self.push(Op::Detach { input }, value, false)
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = ops::conv3d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            value,
            rg,
        ))
    }

    pub fn gelu(&mut self, input: NodeId) -> NodeId {
        let value = ops::gelu(self.value(input));
        let rg = self.needs(input);
        self.push(Op::Gelu { input }, value, rg)
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::upsample_nearest2x(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(Op::Upsample2x { input }, value, rg))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::add_elem(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::sub_elem(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::mul_elem(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = ops::scale(self.value(input), factor);
        let rg = self.needs(input);
        self.push(Op::Scale { input, factor }, value, rg)
    }

    pub fn mean_batch(&mut self, inputs: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        let values: Vec<Tensor<T>> = inputs.iter().map(|&id| self.value(id).clone()).collect();
        let value = ops::reduce_mean_batch(&values, weights)?;
        let rg = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::MeanBatch {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn intensity_diff(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::intensity_diff(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(Op::IntensityDiff { input }, value, rg))
    }

    pub fn smooth_l1(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let value = ops::smooth_l1_mean(self.value(pred), target)?;
        let rg = self.needs(pred);
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(value),
            rg,
        ))
    }

    pub fn cubic_l1(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let value = ops::cubic_l1_mean(self.value(pred), target)?;
        let rg = self.needs(pred);
        Ok(self.push(
            Op::CubicL1 {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(value),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients for
    /// every node that both influences the loss and requires a gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if !ln.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.value.shape()
            )));
        }
        if !ln.requires_grad {
            return Err(Error::invalid(
                "backward: loss does not depend on any parameter",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    // terminal: stash back for collection
                    grads[idx] = Some(g);
                }
                Op::Detach { .. } => {}
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let need_input = self.needs(*input);
                    let (gi, gk, gb) = ops::conv3d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        need_input,
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if self.needs(*kernel) {
                        accumulate(&mut grads, *kernel, gk)?;
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, gb)?;
                    }
                }
                Op::Gelu { input } => {
                    let gi = ops::gelu_backward(self.value(*input), &g);
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Upsample2x { input } => {
                    let gi = ops::upsample_nearest2x_backward(self.value(*input).shape(), &g)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::split_channels(&g, self.value(*a).shape()[0])?;
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, ops::scale(&g, -1.0))?;
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, ops::mul_elem(&g, self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, ops::mul_elem(&g, self.value(*a))?)?;
                    }
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, ops::scale(&g, *factor))?;
                }
                Op::MeanBatch { inputs, weights } => {
                    let total: f64 = weights.iter().sum();
                    for (&src, &w) in inputs.iter().zip(weights) {
                        if self.needs(src) && w != 0.0 {
                            accumulate(&mut grads, src, ops::scale(&g, w / total))?;
                        }
                    }
                }
                Op::IntensityDiff { input } => {
                    let gi = ops::intensity_diff_backward(self.value(*input).shape(), &g)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::SmoothL1 { pred, target } => {
                    let gi = ops::smooth_l1_mean_grad(self.value(*pred), target, g.item());
                    accumulate(&mut grads, *pred, gi)?;
                }
                Op::CubicL1 { pred, target } => {
                    let gi = ops::cubic_l1_mean_grad(self.value(*pred), target, g.item());
                    accumulate(&mut grads, *pred, gi)?;
                }
            }
        }

        // keep only leaf gradients
        let mut by_node: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        for (idx, slot) in grads.into_iter().enumerate() {
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                by_node[idx] = slot;
            }
        }
        Ok(Gradients { by_node })
    }

    /// Gradients keyed by parameter name; parameters the loss never reached
    /// get explicit zeros so optimizer steps see a uniform key set.
    pub fn named_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = grads
                    .by_node
                    .get(idx)
                    .and_then(|s| s.clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    g: Tensor<T>,
) -> Result<()> {
    match grads[id.0].take() {
        Some(prev) => grads[id.0] = Some(ops::add_elem(&prev, &g)?),
        None => grads[id.0] = Some(g),
    }
    Ok(())
}

/// Result of [`Graph::backward`]: gradient tensors for leaf nodes.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|s| s.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_scale_chain_backpropagates() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let s = g.add(x, c).unwrap();
        let s = g.scale(s, 3.0);
        let loss = g.smooth_l1(s, &Tensor::zeros(&[2])).unwrap();
        let grads = g.backward(loss).unwrap();
        // values 33 and 66 are far beyond the knee: d/dx = 3 * sign / n
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[1.5, 1.5]);
    }

    #[test]
    fn detach_blocks_gradient_but_not_value() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::new(&[1], vec![2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap(); // forward x^2, backward sees d as constant
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.smooth_l1(y, &Tensor::zeros(&[1])).unwrap();
        let grads = g.backward(loss).unwrap();
        // |4| > 1 so dloss/dy = 1; dy/dx through the live branch only = 2
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::zeros(&[3]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constant_only_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        let s = g.scale(c, 2.0);
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn unreached_param_gets_zero_named_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::new(&[1], vec![5.0]).unwrap());
        let _unused = g.param("unused", Tensor::zeros(&[2, 2]));
        let loss = g.smooth_l1(x, &Tensor::zeros(&[1])).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = g.named_grads(&grads);
        assert_eq!(named["unused"].shape(), &[2, 2]);
        assert!(named["unused"].data().iter().all(|&v| v == 0.0));
        assert_eq!(named["x"].data(), &[1.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::new(&[1], vec![3.0]).unwrap());
        let y = g.add(x, x).unwrap(); // 2x
        let loss = g.smooth_l1(y, &Tensor::zeros(&[1])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }
}
