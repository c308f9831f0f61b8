use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait GradFn<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order. Entries for inputs
    /// where `ctx.needs(i)` is false may be `None`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    inputs: &'a [Var],
    output: usize,
}

impl<T: Real> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.nodes[self.inputs[i].0].value
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.nodes[self.output].value
    }

    pub fn needs(&self, i: usize) -> bool {
        self.nodes[self.inputs[i].0].requires_grad
    }
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed operations. Nodes are appended in execution order,
/// which is a topological order, so the backward pass is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Records the result of an operation. Rejects non-finite outputs.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        grad_fn: Box<dyn GradFn<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                grad_fn.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            grad_fn: requires_grad.then_some(grad_fn),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a one-element `loss`. Afterwards every leaf that
    /// requires a gradient holds one (zeros when unreachable from `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                inputs: &node.inputs,
                output: i,
            };
            let input_grads = grad_fn.backward(&ctx, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        if acc.shape() != ig.shape() {
                            return Err(Error::Contract(format!(
                                "{} returned gradient of shape {:?} for input of shape {:?}",
                                grad_fn.name(),
                                ig.shape(),
                                acc.shape()
                            )));
                        }
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && node.grad_fn.is_none() {
                node.grad = Some(g.unwrap_or_else(|| Tensor::zeros_like(&node.value)));
            }
        }
        Ok(())
    }
}
