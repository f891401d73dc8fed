//! Dense-array numerics with reverse-mode differentiation.
//!
//! The operation set is exactly what the fusion pipeline needs: elementwise
//! arithmetic with broadcasting, activations, matmul, concatenation/slicing,
//! reductions, 2-D convolutions, bilinear grid sampling and layer norm. Every
//! differentiable operation is validated against central finite differences
//! (see [`check::grad_check`]).
//!
//! A computation graph is recorded dynamically: each operation produces a new
//! [`Tensor`] holding its inputs as parents plus a backward closure.
//! [`Tensor::backward`] walks the recorded graph in reverse creation order and
//! accumulates gradients into every reachable tensor with `requires_grad`.
//! Tensors are reference-counted and confined to one thread; independent
//! graphs may run on different threads.

mod check;
mod conv;
mod ops;
mod sample;

pub use check::{grad_check, numerical_gradient};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::{Error, Real, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Context handed to backward closures.
pub(crate) struct BackwardCtx<'a> {
    /// Forward output of the node being differentiated.
    pub out: &'a [Real],
    /// Gradient of the loss w.r.t. that output.
    pub grad: &'a [Real],
    /// The node's inputs, in registration order.
    pub parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx)>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<Real>>,
    grad: RefCell<Option<Vec<Real>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense tensor participating in reverse-mode differentiation.
///
/// Cloning is cheap (reference-counted); two clones refer to the same node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{expect} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, false)
    }

    /// Learnable leaf: gradients accumulate here during backward passes.
    pub fn param(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; n], false).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: Real) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false).expect("consistent by construction")
    }

    pub fn scalar(value: Real) -> Tensor {
        Tensor::full(&[1], value)
    }

    /// Internal: result of an operation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<Real>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow of the forward data.
    pub fn data(&self) -> Ref<'_, Vec<Real>> {
        self.0.data.borrow()
    }

    /// Copy of the forward data.
    pub fn to_vec(&self) -> Vec<Real> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Accumulated gradient, if a backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values (used by optimizers and finite differences).
    /// The graph downstream of this tensor is stale afterwards.
    pub fn set_data(&self, values: &[Real]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn set_elem(&self, index: usize, value: Real) {
        self.0.data.borrow_mut()[index] = value;
    }

    /// A constant leaf sharing this tensor's current values; gradients do not
    /// flow through it.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.to_vec(), false)
            .expect("consistent by construction")
    }

    /// True if the two handles refer to the same graph node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Unique creation id of this node within its thread.
    pub fn node_id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[Real]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn grad_or_zeros(&self) -> Vec<Real> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.len()])
    }

    /// Reverse-mode pass from a scalar output.
    ///
    /// Accumulates into the gradients of every reachable `requires_grad`
    /// tensor. Gradients are summed across calls; use [`Tensor::clear_grad`]
    /// between steps.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::shape("backward", "scalar output", format!("{:?}", self.shape())));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        // Creation order is a topological order of the DAG, so visiting
        // reachable nodes by descending id is a valid reverse sweep.
        let mut reachable: Vec<Tensor> = Vec::new();
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            reachable.push(t);
        }
        reachable.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        // Interior nodes start each pass fresh; only leaves accumulate across
        // passes, so optimizers can sum gradients over several backward calls.
        for node in &reachable {
            if !node.0.parents.is_empty() {
                *node.0.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in &reachable {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad = node.grad_or_zeros();
            let out = node.0.data.borrow();
            let ctx = BackwardCtx {
                out: &out,
                grad: &grad,
                parents: &node.0.parents,
            };
            backward(&ctx);
        }
        Ok(())
    }

    /// Total number of graph nodes reachable from this tensor (inclusive),
    /// whether or not they carry gradients.
    pub fn graph_size(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.0.id) {
                for p in &t.0.parents {
                    stack.push(p.clone());
                }
            }
        }
        seen.len()
    }
}

/// Sum with a canonical accumulation order: identical multisets of inputs give
/// bit-identical sums regardless of their original ordering.
pub(crate) fn ordered_sum(values: &mut [Real]) -> Real {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}
