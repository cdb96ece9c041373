//! Dense row-major tensors with a recorded reverse-mode gradient graph.
//!
//! A `Tensor` is a cheap handle (`Rc`) to an immutable value plus an optional
//! gradient accumulator. Operations on tensors that track gradients record a
//! backward closure and their inputs; `backward` replays that record in
//! reverse topological order.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording any operations for differentiation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_DISABLED.with(|g| g.replace(true));
    let out = f();
    GRAD_DISABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    !GRAD_DISABLED.with(|g| g.get())
}

/// Gradients for each input of a recorded op; `None` for inputs that do not track.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> InputGrads<T>>;

pub(crate) struct GradFn<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.inner.grad_fn.as_ref().map(|g| g.op))
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                grad_fn,
            }),
        }
    }

    /// Constant tensor. Fails when `data.len()` disagrees with `shape`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::Dimension {
                op: "new",
                left: vec![data.len()],
                right: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::c(x)).collect(), shape)
    }

    /// Result of a differentiable op. Records `backward` only when some input
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) -> InputGrads<T> + 'static,
    ) -> Self {
        let record = grad_enabled() && inputs.iter().any(Tensor::tracks);
        let grad_fn = record.then(|| GradFn {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Self::build(data, shape, false, grad_fn)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the values. Only meaningful on leaves (optimizer steps,
    /// weight loading); mutating an interior node does not re-run its producers.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|x| x.f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as trainable or frozen. Dropping the flag also clears any grad.
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
        if !on {
            self.inner.grad.borrow_mut().take();
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// True when gradients flow into or through this tensor.
    pub fn tracks(&self) -> bool {
        self.inner.grad_fn.is_some() || self.inner.requires_grad.get()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().take();
    }

    /// Detached copy sharing no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Topologically ordered record of every tracked op reachable from `self`.
    pub fn record(&self) -> ComputationRecord {
        let order = topo_order(self);
        let entries = order
            .iter()
            .filter_map(|t| {
                t.inner.grad_fn.as_ref().map(|g| RecordEntry {
                    op: g.op,
                    output: t.id(),
                    inputs: g.inputs.iter().map(Tensor::id).collect(),
                })
            })
            .collect();
        ComputationRecord { entries }
    }

    /// Accumulates d(self)/d(leaf) into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.inner.grad_fn {
                Some(f) => {
                    let input_grads = (f.backward)(&g, &f.inputs);
                    debug_assert_eq!(input_grads.len(), f.inputs.len());
                    for (input, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.tracks() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "grad size for {}", f.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    if node.requires_grad() {
                        let mut slot = node.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(f) = &node.inner.grad_fn {
            for input in f.inputs.iter().rev() {
                if input.tracks() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub output: usize,
    pub inputs: Vec<usize>,
}

/// Ordered list of executed differentiable ops; producers precede consumers.
#[derive(Debug, Clone, Default)]
pub struct ComputationRecord {
    pub entries: Vec<RecordEntry>,
}

impl ComputationRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every input produced by a recorded op appears earlier in the record.
    pub fn is_topological(&self) -> bool {
        let mut seen = HashSet::new();
        let produced: HashSet<usize> = self.entries.iter().map(|e| e.output).collect();
        for e in &self.entries {
            if e.inputs.iter().any(|i| produced.contains(i) && !seen.contains(i)) {
                return false;
            }
            seen.insert(e.output);
        }
        true
    }
}
