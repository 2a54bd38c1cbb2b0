//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Operations record their parents and a [`GradFn`] only when at least
//! one input requires a gradient, so inference-only forwards build no graph.
//! Leaves that require gradients own a [`GradSlot`] into which
//! [`Tensor::backward`] accumulates; slots are shared with
//! [`Parameter`](crate::optim::Parameter)s so gradients from several
//! backward calls sum until the optimizer clears them.

pub mod conv;
pub mod memory;
pub mod norm;
pub mod ops;
pub mod pool;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive};

use crate::error::{ensure, Result};
pub use memory::{measure_peak, with_tracker, Buffer, MemTracker};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Element:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits element type")
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|v| *v = *v * beta);
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the strided
                // index ranges; every public op validates shapes first.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Row-major `a[m,k] · b[k,n]` into a fresh vector.
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    c
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Splits an NCHW shape.
    pub fn nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

/// Accumulator for the gradient of a leaf.
#[derive(Debug, Default)]
pub struct GradSlot<T> {
    grad: Mutex<Option<Buffer<T>>>,
}

impl<T: Element> GradSlot<T> {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            grad: Mutex::new(None),
        })
    }

    pub fn accumulate(&self, g: &[T]) {
        let mut slot = self.grad.lock().expect("grad slot poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(Buffer::tracked(g.to_vec())),
        }
    }

    pub fn get(&self) -> Option<Vec<T>> {
        self.grad
            .lock()
            .expect("grad slot poisoned")
            .as_ref()
            .map(|b| b.to_vec())
    }

    pub fn take(&self) -> Option<Vec<T>> {
        self.grad
            .lock()
            .expect("grad slot poisoned")
            .take()
            .map(Buffer::into_vec)
    }

    pub fn is_set(&self) -> bool {
        self.grad.lock().expect("grad slot poisoned").is_some()
    }

    pub fn clear(&self) {
        self.grad.lock().expect("grad slot poisoned").take();
    }
}

/// Backward rule of one operation.
pub(crate) trait GradFn<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per parent (same order as recorded). Entries for
    /// parents that do not require gradients may be `None`.
    fn backward(&self, grad_out: &[T], parents: &[Tensor<T>], out: &[T])
        -> Result<Vec<Option<Vec<T>>>>;
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Element> {
    id: u64,
    shape: Shape,
    data: Arc<Buffer<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    slot: Option<Arc<GradSlot<T>>>,
}

#[derive(Clone)]
pub struct Tensor<T: Element>(Arc<Node<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field(
                "op",
                &self.0.grad_fn.as_ref().map(|g| g.name()).unwrap_or("leaf"),
            )
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn from_node(
        shape: Shape,
        data: Arc<Buffer<T>>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        grad_fn: Option<Box<dyn GradFn<T>>>,
        slot: Option<Arc<GradSlot<T>>>,
    ) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            grad_fn,
            slot,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.numel() == data.len() && shape.dims().iter().all(|&d| d > 0),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Ok(Self::from_node(
            shape,
            Arc::new(Buffer::tracked(data)),
            false,
            Vec::new(),
            None,
            None,
        ))
    }

    /// Leaf that requires a gradient, with its own accumulator.
    pub fn leaf(data: Vec<T>, shape: impl Into<Shape>) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_leaf(GradSlot::new()))
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], Shape::scalar()).expect("scalar shape")
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self::new(vec![T::zero(); shape.numel()], shape).expect("zeros shape")
    }

    pub(crate) fn param_leaf(
        data: Arc<Buffer<T>>,
        shape: Shape,
        slot: Option<Arc<GradSlot<T>>>,
    ) -> Self {
        let rg = slot.is_some();
        Self::from_node(shape, data, rg, Vec::new(), None, slot)
    }

    fn into_leaf(self, slot: Arc<GradSlot<T>>) -> Self {
        Self::from_node(
            self.0.shape.clone(),
            self.0.data.clone(),
            true,
            Vec::new(),
            None,
            Some(slot),
        )
    }

    /// Records the result of an operation. The graph edge is kept only when
    /// some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Shape,
        parents: Vec<Tensor<T>>,
        grad_fn: impl GradFn<T> + 'static,
    ) -> Self {
        let data = Arc::new(Buffer::tracked(data));
        if parents.iter().any(Tensor::requires_grad) {
            Self::from_node(shape, data, true, parents, Some(Box::new(grad_fn)), None)
        } else {
            Self::from_node(shape, data, false, Vec::new(), None, None)
        }
    }

    /// Same values and shape, no graph: nothing downstream of the result can
    /// send a gradient to the producers of `self`.
    pub fn detach(&self) -> Self {
        Self::from_node(
            self.0.shape.clone(),
            self.0.data.clone(),
            false,
            Vec::new(),
            None,
            None,
        )
    }

    /// A detached copy that is itself a fresh gradient leaf.
    pub fn detach_leaf(&self) -> Self {
        self.detach().into_leaf(GradSlot::new())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.0.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.grad_fn.as_ref().map(|g| g.name()).unwrap_or("leaf")
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.slot.as_ref().and_then(|s| s.get())
    }

    pub fn grad_slot(&self) -> Option<&Arc<GradSlot<T>>> {
        self.0.slot.as_ref()
    }

    pub fn shares_storage_with(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.0.data, &other.0.data)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        ensure!(
            self.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape()
        );
        self.backward_with_grad(vec![T::one()])
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with_grad(&self, seed: Vec<T>) -> Result<()> {
        ensure!(
            seed.len() == self.numel(),
            "seed gradient has {} elements, tensor has {}",
            seed.len(),
            self.numel()
        );
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Buffer<T>> = HashMap::new();
        grads.insert(self.id(), Buffer::tracked(seed));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(slot) = &node.0.slot {
                slot.accumulate(&g);
                continue;
            }
            let Some(f) = &node.0.grad_fn else { continue };
            let parent_grads = f.backward(&g, &node.0.parents, node.data())?;
            drop(g);
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "{} grad size", f.name());
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        grads.insert(p.id(), Buffer::tracked(pg));
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph rooted at `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl<T: Element> Drop for Node<T> {
    fn drop(&mut self) {
        // Unlink iteratively so deep graphs do not overflow the stack.
        let mut pending: Vec<Tensor<T>> = std::mem::take(&mut self.parents);
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                pending.append(&mut node.parents);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;

    #[test]
    fn square_gradient() {
        let w = Tensor::<f64>::leaf(vec![3.0], [1]).unwrap();
        sum(&mul(&w, &w).unwrap()).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let w = Tensor::<f64>::leaf(vec![-1.0, 2.0], [2]).unwrap();
        sum(&relu(&w)).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::<f64>::leaf(vec![1.0, 2.0], [2]).unwrap();
        assert!(relu(&w).backward().is_err());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::<f64>::leaf(vec![1.0, -2.0], [2]).unwrap();
        let w = Tensor::<f64>::leaf(vec![0.5, 4.0], [2]).unwrap();
        let h = scalar_mul(&x, 3.0);
        let y = h.detach();
        assert!(!y.requires_grad());
        assert!(y.shares_storage_with(&h));
        sum(&mul(&y, &w).unwrap()).backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![3.0, -6.0]);
    }

    #[test]
    fn detach_is_idempotent() {
        let x = Tensor::<f64>::leaf(vec![1.5, 2.5], [2]).unwrap();
        let d1 = x.detach();
        let d2 = d1.detach();
        assert_eq!(d1.data(), d2.data());
        assert!(!d2.requires_grad());
    }

    #[test]
    fn constants_never_collect_grads() {
        let c = Tensor::<f64>::new(vec![2.0], [1]).unwrap();
        let w = Tensor::<f64>::leaf(vec![1.0], [1]).unwrap();
        sum(&mul(&c, &w).unwrap()).backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let w = Tensor::<f64>::leaf(vec![1.0, 2.0], [2]).unwrap();
        let a = sum(&mul(&w, &w).unwrap());
        let b = sum(&scalar_mul(&w, 5.0));
        a.backward().unwrap();
        b.backward().unwrap();
        let sequential = w.grad().unwrap();

        let w2 = Tensor::<f64>::leaf(vec![1.0, 2.0], [2]).unwrap();
        let a2 = sum(&mul(&w2, &w2).unwrap());
        let b2 = sum(&scalar_mul(&w2, 5.0));
        add(&a2, &b2).unwrap().backward().unwrap();
        assert_eq!(sequential, w2.grad().unwrap());
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        let w = Tensor::<f64>::leaf(vec![2.0], [1]).unwrap();
        let h = scalar_mul(&w, 3.0);
        let y = add(&h, &h).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut t = Tensor::<f32>::leaf(vec![1.0], [1]).unwrap();
        for _ in 0..200_000 {
            t = scalar_mul(&t, 1.0);
        }
        drop(t);
    }
}
