//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the
//! operation that produced it. Operators build new tensors via
//! [`Tensor::from_op`], attaching a closure that maps the output gradient to
//! per-input gradients. [`Tensor::backward`] walks the recorded graph in
//! reverse creation order (ids are strictly increasing, so descending id
//! order is a valid reverse topological order) and accumulates gradients
//! into the participating leaves.
//!
//! Graphs are built per loss evaluation and dropped afterwards; parameters
//! are long-lived leaf tensors whose gradient slot persists until cleared.

use alloc::boxed::Box;
use alloc::collections::btree_map::Entry;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::fmt;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use core::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{CoreError, Result};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + fmt::Debug + fmt::Display + 'static
{
}

impl<T> Scalar for T where
    T: Float + AddAssign + SubAssign + MulAssign + DivAssign + fmt::Debug + fmt::Display + 'static
{
}

/// Converts an `f64` constant into the scalar type. The constants passed
/// here (epsilons, small integers) are exactly representable in `f32`.
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from(v).expect("numeric constant representable in scalar type")
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient routing for one recorded operation: given the gradient of the
/// output, return one optional gradient buffer per input (None when that
/// input does not require gradients or the operator does not flow into it).
type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
    backward_used: Cell<bool>,
}

pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(CoreError::shape(
            op,
            format!("shape {} needs {expected} elements, got {len}", shape_string(shape)),
        ));
    }
    Ok(())
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite { op });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
                backward_used: Cell::new(false),
            }),
        }
    }

    /// Constant leaf. Rejects shape/length mismatch and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("tensor", shape, data.len())?;
        check_finite("tensor", &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: participates in `backward` and accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("parameter", shape, data.len())?;
        check_finite("parameter", &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); len], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; len])
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    /// Output of an operator. Records a graph node only when some input
    /// requires gradients; otherwise the result is a plain constant.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        check_len(op, &shape, data.len())?;
        check_finite(op, &data)?;
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node { inputs, backward: Box::new(backward) });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(CoreError::shape(
                "item",
                format!("expected a single element, got shape {}", shape_string(self.shape())),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of all reachable
    /// trainable leaves are accumulated (summed onto any existing value).
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(CoreError::NonScalarLoss { elements: self.len() });
        }
        if !self.inner.requires_grad {
            return Err(CoreError::DetachedGraph);
        }
        if self.inner.backward_used.get() {
            return Err(CoreError::RepeatedBackward);
        }

        // Reachable differentiable subgraph, keyed by id. Ids increase with
        // creation order, so iterating the map in reverse visits every
        // tensor after all of its consumers.
        let mut visited: BTreeMap<u64, Tensor<T>> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if visited.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains_key(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            visited.insert(t.id(), t);
        }

        let mut flowing: BTreeMap<u64, Vec<T>> = BTreeMap::new();
        flowing.insert(self.id(), vec![T::one()]);

        for (_, t) in visited.iter().rev() {
            let Some(grad) = flowing.remove(&t.id()) else { continue };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += *g;
                            }
                        }
                        None => *slot = Some(grad),
                    }
                }
                Some(node) => {
                    let input_grads = (node.backward)(&grad);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.len());
                        match flowing.entry(input.id()) {
                            Entry::Occupied(mut e) => {
                                for (a, g) in e.get_mut().iter_mut().zip(&ig) {
                                    *a += *g;
                                }
                            }
                            Entry::Vacant(v) => {
                                v.insert(ig);
                            }
                        }
                    }
                }
            }
        }

        self.inner.backward_used.set(true);
        Ok(())
    }
}
