use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order.
///
/// `Tensor` is a cheaply clonable handle (`Rc` inside); clones share the same
/// storage and gradient slot. Values are immutable after construction except
/// for two sanctioned channels: the gradient buffer (written during
/// `Tape::backward`) and the data buffer (written by the optimizer for
/// parameters and by batch-norm for its running statistics).
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

struct TensorInner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    /// False for tensors produced by a recorded operation; `Tape::backward`
    /// clears non-leaf gradients before each sweep so only leaves accumulate
    /// across repeated calls.
    leaf: bool,
    grad: RefCell<Option<Vec<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, leaf: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                leaf,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Leaf tensor that does not track gradients (inputs, labels, buffers).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data, false, true))
    }

    /// Leaf tensor that accumulates gradients (trainable parameter).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data, true, true))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let count = shape.iter().product();
        Self::from_parts(shape, vec![T::zero(); count], false, true)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let count = shape.iter().product();
        Self::from_parts(shape, vec![value; count], false, true)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], false, true)
    }

    /// Output of a recorded operation (non-leaf when gradients flow into it).
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Self::from_parts(shape, data, requires_grad, !requires_grad)
    }

    /// Copy of this tensor marked as a gradient-accumulating leaf.
    pub fn into_param(self) -> Self {
        Self::from_parts(self.inner.shape.clone(), self.to_vec(), true, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        let d = self.inner.data.borrow();
        if d.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                d.len()
            )));
        }
        Ok(d[0])
    }

    /// Overwrite the stored values. Shape is unchanged; the element count
    /// must match. This is the optimizer's update channel.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut d = self.inner.data.borrow_mut();
        if values.len() != d.len() {
            return Err(Error::shape(format!(
                "set_data: expected {} elements, got {}",
                d.len(),
                values.len()
            )));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Mutable access to the raw buffer (optimizer / running statistics).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        let mut d = self.inner.data.borrow_mut();
        f(&mut d)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    /// Add `delta` into the gradient slot, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.elem_count());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Reset the gradient so every element reads exactly zero.
    pub fn zero_grad(&self) {
        let mut slot = self.inner.grad.borrow_mut();
        if let Some(g) = slot.as_mut() {
            g.fill(T::zero());
        }
    }

    pub(crate) fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Row-major offset helpers for the (B, C, H, W) layout used throughout.
#[inline]
pub(crate) fn idx4(c: usize, h: usize, w: usize, b_i: usize, c_i: usize, y: usize, x: usize) -> usize {
    ((b_i * c + c_i) * h + y) * w + x
}
