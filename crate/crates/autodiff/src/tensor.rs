use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Inputs handed to a [`Backward`] rule when the tape is replayed.
pub struct BackwardCtx<'a, T: Element> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    pub grad: &'a [T],
}

impl<'a, T: Element> BackwardCtx<'a, T> {
    /// Whether input `i` needs a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

/// Vector-Jacobian product of one recorded primitive.
///
/// Returns one entry per input; `None` for inputs that do not require a gradient.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<T>>>,
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) op: Option<Box<dyn Backward<T>>>,
}

/// Dense row-major tensor with optional gradient tracking.
///
/// Values are immutable once created; only the gradient buffer of a leaf
/// changes (through [`Tensor::backward`] and [`Tensor::zero_grad`]). Cloning
/// is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    pub(crate) node: Arc<Node<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Leaf that tracks gradients (a trainable parameter).
    pub fn variable(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_tracked())
    }

    fn into_tracked(self) -> Self {
        match Arc::try_unwrap(self.node) {
            Ok(node) => Self::leaf(node.data, node.shape, true),
            Err(node) => Tensor { node }.with_requires_grad(true),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![], false)
    }

    pub(crate) fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents: Vec::new(),
                op: None,
            }),
        }
    }

    /// Result of a primitive. Provenance is only kept when some input tracks gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        op: impl Backward<T> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let (parents, op): (Vec<Tensor<T>>, Option<Box<dyn Backward<T>>>) = if requires_grad {
            (inputs.iter().map(|t| (*t).clone()).collect(), Some(Box::new(op)))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents,
                op,
            }),
        }
    }

    /// A fresh leaf holding the same values, with gradient tracking switched on or off.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), requires_grad)
    }

    /// A fresh untracked leaf holding the same values.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.node.parents
    }

    pub(crate) fn op(&self) -> Option<&dyn Backward<T>> {
        self.node.op.as_deref()
    }

    /// Convert to another precision as an untracked leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor::leaf(data, self.node.shape.clone(), false)
    }

    /// Copy of this tensor with one element replaced; used by finite-difference checks.
    pub fn with_element(&self, index: usize, value: T) -> Self {
        let mut data = self.node.data.clone();
        data[index] = value;
        Self::leaf(data, self.node.shape.clone(), self.requires_grad())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.node.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
