//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto a shared node. Operations on tensors
//! that require gradients record their inputs and a backward rule on the
//! result node; [`Tensor::backward`] walks the resulting DAG once in reverse
//! topological order and accumulates gradients into every `requires_grad`
//! ancestor. Layout is row-major throughout, with feature maps in N×C×H×W
//! order.

pub(crate) mod kernels;
mod ops;

pub mod gradcheck;

#[cfg(test)]
mod tests;

pub(crate) use kernels as kern;
pub(crate) use ops::nary_op;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule: given the gradient flowing into this node's output and the
/// node's parents, return one gradient contribution per parent (same order).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[Tensor]) -> Vec<Vec<f32>>>;

pub(crate) struct TensorData {
    pub(crate) id: u64,
    pub(crate) label: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) grad: Option<Vec<f32>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward_fn: Option<BackwardFn>,
}

/// Shared handle onto a tensor node. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(op={}, shape={:?}, requires_grad={})",
            d.label, d.shape, d.requires_grad
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        label: impl Into<String>,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                label: label.into(),
                shape,
                data,
                grad: None,
                requires_grad,
                parents,
                backward_fn,
            })),
        }
    }

    /// Leaf tensor from owned data. Fails if the shape does not cover `data`.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, "leaf", vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel_of(shape)], false, "leaf", vec![], None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::make(shape.to_vec(), vec![value; numel_of(shape)], false, "leaf", vec![], None)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::make(vec![], vec![value], false, "leaf", vec![], None)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn label(&self) -> String {
        self.inner.borrow().label.clone()
    }

    pub fn set_label(&self, label: impl Into<String>) {
        self.inner.borrow_mut().label = label.into();
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Extent along `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.inner.borrow().shape[axis]
    }

    /// Borrow the underlying data. The guard must be dropped before any
    /// mutating call on the same tensor.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor with {} elements", d.data.len());
        d.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark a leaf as trainable. Builder-style.
    pub fn with_requires_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite data in place (same element count).
    pub fn set_data(&self, data: &[f32]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), data.len());
        d.data.copy_from_slice(data);
    }

    /// In-place update with simultaneous access to data and grad, used by the
    /// optimizer. `f` receives (data, grad); grad is empty if absent.
    pub fn update_with_grad(&self, f: impl FnOnce(&mut [f32], &[f32])) {
        let mut d = self.inner.borrow_mut();
        let TensorData { data, grad, .. } = &mut *d;
        static EMPTY: [f32; 0] = [];
        f(data.as_mut_slice(), grad.as_deref().unwrap_or(&EMPTY));
    }

    /// Copy of the data as a fresh leaf with no graph history.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::make(d.shape.clone(), d.data.clone(), false, "leaf", vec![], None)
    }

    /// Index of the first non-finite element, if any.
    pub fn find_nonfinite(&self) -> Option<usize> {
        self.inner.borrow().data.iter().position(|v| !v.is_finite())
    }

    fn accumulate_grad(&self, contrib: &[f32]) {
        let mut d = self.inner.borrow_mut();
        let n = d.data.len();
        let g = d.grad.get_or_insert_with(|| vec![0.0; n]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse-mode gradient pass from a scalar loss. Gradients accumulate
    /// into `.grad` of every `requires_grad` tensor reachable from `self`;
    /// repeated calls without zeroing keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 || !self.shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward requires a rank-0 scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let graph = ComputeGraph::from_root(self);

        // Per-call flow buffers keep repeated backward() calls independent:
        // each call contributes exactly one gradient, accumulated at the end.
        let mut flow: HashMap<u64, Vec<f32>> = HashMap::new();
        flow.insert(self.id(), vec![1.0]);

        for node in graph.nodes().iter().rev() {
            let Some(g) = flow.remove(&node.id()) else { continue };
            {
                let d = node.inner.borrow();
                if let Some(bwd) = &d.backward_fn {
                    let contribs = bwd(&g, &d.parents);
                    debug_assert_eq!(contribs.len(), d.parents.len());
                    for (p, c) in d.parents.iter().zip(contribs) {
                        if !p.requires_grad() {
                            continue;
                        }
                        let e = flow.entry(p.id()).or_insert_with(|| vec![0.0; p.numel()]);
                        for (ei, ci) in e.iter_mut().zip(&c) {
                            *ei += ci;
                        }
                    }
                }
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Topologically ordered view of the op DAG below a root tensor
/// (inputs before consumers; the root is last). Each node appears once.
pub struct ComputeGraph {
    order: Vec<Tensor>,
}

impl ComputeGraph {
    pub fn from_root(root: &Tensor) -> ComputeGraph {
        let mut order = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        // Iterative post-order DFS; (node, expanded) pairs.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.contains_key(&node.id()) {
                continue;
            }
            visited.insert(node.id(), ());
            stack.push((node.clone(), true));
            for p in node.inner.borrow().parents.iter() {
                if !visited.contains_key(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        ComputeGraph { order }
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// First tensor in execution order holding a NaN or Inf, reported as
    /// (op label, shape). Drives the training-abort diagnostic.
    pub fn first_nonfinite(&self) -> Option<(String, Vec<usize>)> {
        self.order
            .iter()
            .find(|t| t.find_nonfinite().is_some())
            .map(|t| (t.label(), t.shape()))
    }
}
