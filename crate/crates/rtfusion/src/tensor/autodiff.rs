//! Reverse-mode gradient replay over the recorded op graph.
//!
//! Each op result holds an `Arc<Node>` pointing at its tracked parents.
//! Node ids are allocated monotonically, so any child id is larger than all
//! of its parents' ids and descending-id order is a reverse topological
//! order; [`backward`] visits every reachable node exactly once in that
//! order, accumulating gradients into a table keyed by node id.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule of one recorded primitive.
///
/// `grad` is the upstream gradient for the op output (length = output
/// numel). `needs[i]` says whether parent `i` is tracked; the rule returns
/// one gradient per parent, `None` where not needed.
pub(crate) trait BackwardOp<E: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>>;
}

pub(crate) struct Node<E: Scalar> {
    id: u64,
    shape: Shape,
    parents: Vec<Option<Arc<Node<E>>>>,
    op: Option<Box<dyn BackwardOp<E>>>,
}

impl<E: Scalar> Node<E> {
    pub(crate) fn leaf(shape: Shape) -> Self {
        Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            parents: Vec::new(),
            op: None,
        }
    }

    pub(crate) fn interior(
        shape: Shape,
        parents: Vec<Option<Arc<Node<E>>>>,
        op: Box<dyn BackwardOp<E>>,
    ) -> Self {
        Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            parents,
            op: Some(op),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }
}

/// Gradient table produced by [`Tensor::backward`]: one entry per tracked
/// tensor reachable from the loss.
pub struct Gradients<E: Scalar> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    /// Accumulated gradient for `t`, if `t` is tracked and was reached.
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.grads.get(&t.node_id()?).map(|g| g.as_slice())
    }

    /// Gradient for a leaf, defaulting to zeros when the loss does not
    /// depend on it (an unused parameter receives exactly zero gradient).
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Vec<E> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![E::zero(); t.numel()],
        }
    }

    pub fn contains(&self, t: &Tensor<E>) -> bool {
        self.get(t).is_some()
    }
}

impl<E: Scalar> Tensor<E> {
    /// Reverse-mode gradients of a scalar loss with respect to every tracked
    /// tensor it depends on.
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {}",
                self.shape()
            )));
        }
        let root = self.node().ok_or_else(|| {
            Error::InvalidArgument("backward on an untracked tensor (no recorded graph)".into())
        })?;

        // Collect every reachable node, then replay in descending id order.
        let mut reachable: Vec<Arc<Node<E>>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![Arc::clone(root)];
        while let Some(node) = stack.pop() {
            if seen.insert(node.id, ()).is_some() {
                continue;
            }
            for parent in node.parents.iter().flatten() {
                stack.push(Arc::clone(parent));
            }
            reachable.push(node);
        }
        reachable.sort_by(|a, b| b.id.cmp(&a.id));

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(root.id, vec![E::one()]);

        for node in &reachable {
            let Some(op) = node.op.as_deref() else {
                continue; // leaf: gradient stays in the table
            };
            let grad = grads
                .get(&node.id)
                .expect("reachable node must have received a gradient")
                .clone();
            debug_assert_eq!(grad.len(), node.shape.numel());
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let parts = op.backward(&grad, &needs);
            debug_assert_eq!(parts.len(), node.parents.len(), "op {}", op.name());
            for (parent, part) in node.parents.iter().zip(parts) {
                let (Some(parent), Some(part)) = (parent, part) else {
                    continue;
                };
                debug_assert_eq!(
                    part.len(),
                    parent.shape.numel(),
                    "gradient length mismatch for parent of {}",
                    op.name()
                );
                let slot = grads
                    .entry(parent.id)
                    .or_insert_with(|| vec![E::zero(); parent.shape.numel()]);
                for (s, p) in slot.iter_mut().zip(&part) {
                    *s += *p;
                }
            }
        }

        Ok(Gradients { grads })
    }
}
