use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Function>>,
    requires_grad: bool,
}

/// Tape of operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the node index is already a
/// topological order and backward simply walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `op` producing `value` from `inputs`.
    pub fn apply(&mut self, op: impl Function + 'static, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, inputs.to_vec(), Some(Box::new(op)), requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Option<Box<dyn Function>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((var, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape(), "{}", op.name());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are consumed; only leaves keep theirs.
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero if `v` did not participate.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
