use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait BackwardRule<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same order as recorded). Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    inputs: Vec<Var>,
    rule: Option<Box<dyn BackwardRule<S>>>,
    grad: Option<Tensor<S>>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. Gradients are retained for leaf
/// nodes only; interior gradients are released as soon as they have been
/// propagated.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_ran: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_ran: false, check_finite: false }
    }

    /// Tape that rejects any operation producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape { check_finite: true, ..Self::new() }
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable input whose gradient will be retained.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, inputs: Vec::new(), rule: None, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.requires_grad)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes.get_mut(v.0).and_then(|n| n.grad.take())
    }

    /// Appends the result of an operation. The backward rule is kept only if
    /// at least one input participates in differentiation.
    pub fn record(
        &mut self,
        value: Tensor<S>,
        inputs: &[Var],
        rule: impl BackwardRule<S> + 'static,
    ) -> Result<Var> {
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: rule.name().to_string() });
        }
        let (inputs, rule) = if requires_grad {
            (inputs.to_vec(), Some(Box::new(rule) as Box<dyn BackwardRule<S>>))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node { value, requires_grad, inputs, rule, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates leaf gradients with d(loss)/d(leaf), accumulating over every
    /// path through the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardTwice);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let (requires_grad, seed) = (root.requires_grad, Tensor::ones_like(&root.value));
        self.backward_ran = true;
        if !requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            let input_grads = {
                let node = &self.nodes[i];
                let (Some(rule), Some(grad)) = (&node.rule, &node.grad) else {
                    continue;
                };
                let values: Vec<&Tensor<S>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> =
                    node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let grads = rule.backward(&values, &node.value, grad, &needs)?;
                if grads.len() != node.inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        node.inputs.len()
                    )));
                }
                node.inputs.iter().copied().zip(grads).collect::<Vec<_>>()
            };
            self.nodes[i].grad = None;
            for (v, g) in input_grads {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[v.0];
                if !target.requires_grad {
                    continue;
                }
                if g.shape() != target.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward",
                        lhs: g.shape().to_vec(),
                        rhs: target.value.shape().to_vec(),
                    });
                }
                match &mut target.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Clears every gradient buffer so `backward` may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_ran = false;
    }
}
