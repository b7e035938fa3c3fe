use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Upstream gradient, same length as `output`.
    pub grad: &'a [f64],
}

/// Returns one gradient per input, `None` where the input gets nothing.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    inputs: Vec<usize>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<Op>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and a backward pass is a single reverse sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros if none reached `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.index];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor { shape: node.value.shape.clone(), data }
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    /// Record an operation with a hand-written backward rule.
    ///
    /// The output only tracks gradients when at least one input does; otherwise
    /// the rule is dropped and the result is a constant.
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let op = requires_grad.then(|| Op { name, inputs: idx, backward: Box::new(backward) });
        Ok(self.push(value, requires_grad, op))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node that
    /// requires one. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].value.shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.nodes[root].grad = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let (Some(op), Some(grad)) = (node.op.as_ref(), node.grad.as_ref()) else {
                continue;
            };
            // Every input index is < i, so it lives in `head`.
            let input_grads = {
                let ctx = BackwardCtx {
                    inputs: op.inputs.iter().map(|&j| &head[j].value).collect(),
                    output: &node.value,
                    grad,
                };
                (op.backward)(&ctx)
            };
            debug_assert_eq!(input_grads.len(), op.inputs.len(), "backward arity of {}", op.name);
            for (&j, g) in op.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let target = &mut head[j];
                if !target.requires_grad {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(op.name));
                }
                match target.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => target.grad = Some(g),
                }
            }
            if node.op.is_some() && i != root {
                // intermediate gradients are not needed after propagation
                node.grad = None;
            }
        }
        Ok(())
    }
}
