use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule of a recorded operation.
///
/// Receives the operation's inputs, its forward output and the gradient with
/// respect to that output; returns one optional gradient per input, each with
/// the input's number of elements.
pub type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Immutable n-dimensional array participating in the autodiff graph.
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn build(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        assert_eq!(
            data.len(),
            crate::numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant tensor (no gradient is tracked).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf tensor whose gradient is collected by [`Tensor::backward`].
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(T::zero(), shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(T::one(), shape)
    }

    pub fn full(value: T, shape: &[usize]) -> Self {
        Self::new(vec![value; crate::numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[])
    }

    /// Records a custom operation.
    ///
    /// When none of `parents` requires a gradient the result is a constant
    /// and `backward` is dropped.
    pub fn from_op(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::build(data, shape.to_vec(), true, parents, Some(backward))
        } else {
            Self::new(data, shape)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::new(self.0.data.clone(), &self.0.shape)
    }

    /// Gradients of this single-element tensor with respect to every leaf.
    pub fn backward(&self) -> Grads<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        self.backward_with(vec![T::one()])
    }

    /// Vector-Jacobian product seeded with `seed` (same length as `self`).
    pub fn backward_with(&self, seed: Vec<T>) -> Grads<T> {
        assert_eq!(seed.len(), self.numel(), "seed length mismatch");
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(rule) => {
                    let parent_grads = rule(&node.0.parents, &node.0.data, &grad);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Grads { map: leaves }
    }

    /// Post-order over the gradient-carrying subgraph (inputs before users).
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        if !self.requires_grad() {
            return order;
        }
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in &node.0.parents {
                if parent.requires_grad() && !seen.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }
}

impl<T: Real> Drop for Node<T> {
    fn drop(&mut self) {
        // Unlink long chains iteratively so deep graphs cannot overflow the
        // stack through recursive drops.
        let mut stack: Vec<Tensor<T>> = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Default)]
pub struct Grads<T: Real> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `leaf`, or `None` when it did not influence the output.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&leaf.id()).map(Vec::as_slice)
    }

    /// Gradient for `leaf`, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Vec<T> {
        self.get(leaf)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); leaf.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
