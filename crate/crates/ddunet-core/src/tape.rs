use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reverse-mode autodiff tape.
///
/// Operations append themselves in execution order during the forward pass
/// (define-by-run; a fresh tape is built for every forward). `backward`
/// replays the entries in exact reverse order, reading each output's gradient
/// and accumulating into the inputs. Non-leaf gradients are cleared before
/// every sweep, so leaf tensors (parameters) accumulate across repeated
/// `backward` calls until `zero_grad`.
///
/// A tape is single-threaded; independent tapes on independent threads do not
/// interact.
pub struct Tape<T: Scalar> {
    entries: RefCell<Vec<Box<dyn Fn()>>>,
    produced: RefCell<Vec<Tensor<T>>>,
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward rules (training / gradient checking).
    pub fn new() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            produced: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Tape that records nothing; used for pure inference.
    pub fn inference() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            produced: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Record one operation: its produced output and the rule that moves the
    /// output gradient to the inputs. Called by the ops module only.
    pub(crate) fn record(&self, output: &Tensor<T>, backward: impl Fn() + 'static) {
        debug_assert!(self.recording);
        self.produced.borrow_mut().push(output.clone());
        self.entries.borrow_mut().push(Box::new(backward));
    }

    /// Seed `loss` with gradient one and propagate backwards through every
    /// recorded operation. `loss` must be a scalar produced on this tape.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.elem_count() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.entries.borrow().is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        for t in self.produced.borrow().iter() {
            if !t.is_leaf() {
                t.clear_grad();
            }
        }
        loss.accumulate_grad(&[T::one()]);
        let entries = self.entries.borrow();
        for entry in entries.iter().rev() {
            entry();
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
