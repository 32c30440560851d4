//! Dense n-dimensional float tensors with reverse-mode automatic
//! differentiation.
//!
//! A [`Tensor`] is a row-major buffer plus an optional backreference into the
//! computation graph that produced it. Forward primitives live in [`ops`];
//! calling them on tensors that require gradients records graph nodes, and
//! [`Tensor::backward`] walks the graph in reverse topological order,
//! accumulating gradients into the leaves.
//!
//! Tensors are immutable after forward creation except for their gradient
//! buffers (and explicit in-place parameter updates between steps). A graph
//! is confined to one thread; the handle is deliberately not `Send`.

pub mod gradcheck;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::rc::Rc;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};
use ops::Op;

/// Scalar element of a tensor. Training and inference run at `f32`; the
/// gradient-check harness can rerun whole graphs at `f64`.
pub trait Element: Float + NumCast + Debug + 'static {
    /// General matrix multiply dispatched to a SIMD kernel.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Element for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True when forward primitives record graph nodes on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with graph recording disabled (restored afterwards, also on
/// panic). Used for evaluation-mode forwards and finite-difference probes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    /// `None` for leaves (inputs, parameters, constants).
    op: Option<Op<E>>,
}

/// Handle to a tensor; clones share the same buffer and graph node.
pub struct Tensor<E: Element = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn build(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// A leaf tensor that does not take gradients.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::validate(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf tensor that accumulates gradients (a parameter or probed input).
    pub fn param_from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::validate(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    fn validate(shape: &[usize], data: &[E]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![E::zero(); numel], false, None)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: E) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, op: Option<Op<E>>) -> Self {
        let requires_grad = op.is_some();
        Self::build(shape, data, requires_grad, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Borrow the raw row-major buffer.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrite the buffer in place. Only meaningful for leaves between
    /// forward passes (optimizer updates, checkpoint loads).
    pub fn set_data(&self, new: &[E]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Current gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, &b) in buf.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn op(&self) -> Option<&Op<E>> {
        self.inner.op.as_ref()
    }

    /// Reverse-mode gradient computation from a scalar.
    ///
    /// Gradients accumulate (`+=`) into every reachable leaf that requires
    /// them; calling backward twice without zeroing doubles leaf gradients.
    /// Intermediate gradients are dropped when the walk finishes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::invalid(
                "backward on a tensor that does not belong to a computation graph".to_string(),
            ));
        }

        // Reverse topological order via iterative post-order DFS.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.op() {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input, false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in order.iter().rev() {
            let gout = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            match node.op() {
                Some(op) => {
                    for (input, gin) in op.backward(node, &gout) {
                        if !input.requires_grad() {
                            continue;
                        }
                        match grads.entry(input.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                let buf = e.get_mut();
                                for (a, b) in buf.iter_mut().zip(gin) {
                                    *a = *a + b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(gin);
                            }
                        }
                    }
                }
                None => node.accumulate_grad(&gout),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn backward_relu_mask() {
        let x = Tensor::param_from_vec(&[2], vec![-1.0f32, 2.0]).unwrap();
        let loss = ops::sum(&ops::relu(&x)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let x = Tensor::param_from_vec(&[1], vec![3.0f32]).unwrap();
        let loss = ops::sum(&ops::mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::param_from_vec(&[3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let loss = ops::sum(&ops::mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param_from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let y = ops::relu(&x);
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_rejects_graphless() {
        let x = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::param_from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let y = no_grad(|| ops::relu(&x));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn grads_not_retained_on_intermediates() {
        let x = Tensor::param_from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let y = ops::relu(&x);
        let loss = ops::sum(&y).unwrap();
        loss.backward().unwrap();
        assert!(y.grad().is_none());
        assert!(x.grad().is_some());
    }
}
