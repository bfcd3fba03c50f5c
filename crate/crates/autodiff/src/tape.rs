use std::collections::{HashMap, HashSet};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{BackwardCtx, Tensor};

/// Recorded primitive applications reachable from a root, in topological order.
///
/// The tape is rebuilt from the provenance graph for every backward pass, so
/// it is never shared between training steps.
pub struct ComputationTape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> ComputationTape<T> {
    /// Collect every gradient-tracking ancestor of `root` (inputs before outputs).
    pub fn record(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        if !root.requires_grad() {
            return Self { nodes: order };
        }
        // Iterative post-order DFS; deep graphs would overflow a recursive walk.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.id());
        while let Some((node, child)) = stack.pop() {
            let parents = node.parents();
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        Self { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Primitive names in recording order (leaves report `"leaf"`).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|t| t.op().map_or("leaf", |op| op.name())).collect()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Replay in reverse, seeding the root with `seed` and accumulating into leaves.
    pub fn replay(&self, seed: Vec<T>) {
        let Some(root) = self.nodes.last() else { return };
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        for node in self.nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else { continue };
            match node.op() {
                None => node.accumulate_grad(&grad),
                Some(op) => {
                    let ctx = BackwardCtx {
                        inputs: node.parents(),
                        output: node.data(),
                        output_shape: node.shape(),
                        grad: &grad,
                    };
                    let grads = op.backward(&ctx);
                    debug_assert_eq!(grads.len(), node.parents().len(), "{}", op.name());
                    for (parent, g) in node.parents().iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "{} grad length", op.name());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Populate `grad` of every gradient-tracking leaf reachable from this scalar.
    ///
    /// Gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        ComputationTape::record(self).replay(vec![T::ONE]);
        Ok(())
    }
}
