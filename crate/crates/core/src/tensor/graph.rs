use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice tells the closure which parents actually need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// A single-use tape. Nodes are appended in execution order, which is
/// therefore a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    /// Registers an input. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Like [`Graph::leaf`] but shares an existing allocation.
    pub fn leaf_shared(&mut self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.push(Node {
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// First node (in execution order) whose value contains NaN or +∞.
    /// −∞ is skipped: it is the legitimate value of masked attention logits.
    pub fn first_invalid(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY))
            .map(|(i, n)| (i, n.op))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node. The backward closure is dropped when no parent
    /// takes part in differentiation.
    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse sweep from a single-element `loss`. Afterwards every node that
    /// requires a gradient and is reachable from the loss holds one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[i].backward.take() else {
                continue;
            };
            let Some(g) = self.grads[i].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = self.nodes[i]
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(g, &needs);
            debug_assert_eq!(parent_grads.len(), needs.len(), "op {}", self.nodes[i].op);
            let parents = self.nodes[i].parents.clone();
            for ((p, pg), need) in parents.into_iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "grad shape from op {}",
                    self.nodes[i].op
                );
                match &mut self.grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for node in &mut self.nodes {
            node.backward = None;
        }
        Ok(())
    }
}
