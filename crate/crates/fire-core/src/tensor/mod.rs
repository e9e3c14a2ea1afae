//! Dense n-D tensors with reverse-mode automatic differentiation.
//!
//! The engine covers exactly the operation set the registration networks
//! need: convolution, dense layers, activations, instance normalization,
//! pooling, linear resampling, elementwise arithmetic and reductions, plus
//! the warp-specific ops built on the same machinery in [`crate::warp`].
//!
//! Tensors are cheaply cloneable handles (`Arc` inside) with value
//! semantics: data is immutable after construction. Recording is implicit —
//! any op whose inputs participate in a graph produces a recorded output —
//! and can be suppressed with [`no_grad`]. A backward pass walks the
//! recorded ops in exact reverse execution order and accumulates gradients
//! additively, so a tensor used in several places receives every
//! contribution.

mod adam;
mod conv;
mod ops;

pub mod gradcheck;

pub use adam::AdamState;
pub use conv::{resnet_block, Padding, ResBlockParams};
pub use ops::Activation;

use std::cell::Cell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{FireError, Result};
use crate::scalar::Scalar;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with op recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.replace(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product of one recorded op: receives the output gradient
/// and a per-parent "is a gradient needed" mask, returns one optional
/// gradient buffer per parent.
type BackwardFn<S> = Box<dyn Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + Send + Sync>;

struct Node<S: Scalar> {
    id: u64,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
    grad: Mutex<Option<Vec<S>>>,
}

struct TensorInner<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    node: Option<Arc<Node<S>>>,
}

/// Dense row-major n-D array, optionally tracked for differentiation.
///
/// A scalar is represented by the empty shape `[]`.
pub struct Tensor<S: Scalar = f32> {
    inner: Arc<TensorInner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracked={}",
            self.inner.shape,
            self.inner.node.is_some()
        )?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &self.inner.data[..])?;
        }
        write!(f, ")")
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn all_finite<S: Scalar>(data: &[S]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl<S: Scalar> Tensor<S> {
    /// Constant (untracked) tensor. Errors if the element count does not
    /// match the shape or the data contains NaN/Inf.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(FireError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, got {}", numel_of(shape), data.len()),
            });
        }
        if !all_finite(&data) {
            return Err(FireError::NonFinite { op: "new" });
        }
        Ok(Self::untracked(shape.to_vec(), data))
    }

    /// Trainable leaf: participates in every recorded graph and receives a
    /// gradient from [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.requires_grad())
    }

    pub fn scalar(v: S) -> Self {
        Self::untracked(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::untracked(shape.to_vec(), vec![S::zero(); numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::untracked(shape.to_vec(), vec![v; numel_of(shape)])
    }

    fn untracked(shape: Vec<usize>, data: Vec<S>) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                shape,
                data: Arc::new(data),
                node: None,
            }),
        }
    }

    /// Returns a leaf copy of this tensor that requires a gradient.
    pub fn requires_grad(&self) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                node: Some(Arc::new(Node {
                    id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                    requires_grad: true,
                    parents: Vec::new(),
                    backward: None,
                    grad: Mutex::new(None),
                })),
            }),
        }
    }

    /// Same data, severed from any recorded graph.
    pub fn detach(&self) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                node: None,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.inner.data)
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data[0]
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        let node = self.inner.node.as_ref()?;
        node.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(node) = &self.inner.node {
            *node.grad.lock().unwrap() = None;
        }
    }

    /// Core op constructor: validates finiteness and records the op when
    /// any parent participates in a graph and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: &[&Tensor<S>],
        backward: impl Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + Send + Sync + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}: bad output buffer");
        if !all_finite(&data) {
            return Err(FireError::NonFinite { op });
        }
        let record = grad_enabled() && parents.iter().any(|p| p.inner.node.is_some());
        let node = record.then(|| {
            Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                requires_grad: false,
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Some(Box::new(backward) as BackwardFn<S>),
                grad: Mutex::new(None),
            })
        });
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                shape,
                data: Arc::new(data),
                node,
            }),
        })
    }

    /// Reverse-mode sweep from a scalar loss. Visits recorded ops in exact
    /// reverse execution order; afterwards every reachable leaf created
    /// with [`Tensor::param`] / [`Tensor::requires_grad`] holds its
    /// gradient, additively accumulated over all uses.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(FireError::InvalidShape {
                op: "backward",
                shape: self.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let root = self.inner.node.as_ref().ok_or_else(|| {
            FireError::InvalidArgument("backward on a tensor with no recorded graph".into())
        })?;

        // Gather every ancestor node, then replay in descending-id order.
        let mut reachable: Vec<Arc<Node<S>>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![Arc::clone(root)];
        seen.insert(root.id);
        while let Some(node) = stack.pop() {
            for parent in &node.parents {
                if let Some(pn) = &parent.inner.node {
                    if seen.insert(pn.id) {
                        stack.push(Arc::clone(pn));
                    }
                }
            }
            reachable.push(node);
        }
        reachable.sort_by(|a, b| b.id.cmp(&a.id));

        *root.grad.lock().unwrap() = Some(vec![S::one()]);

        for node in &reachable {
            let grad_out = if node.requires_grad {
                node.grad.lock().unwrap().clone()
            } else {
                // Interior gradients are consumed exactly once.
                node.grad.lock().unwrap().take()
            };
            let Some(grad_out) = grad_out else { continue };
            let Some(backward) = &node.backward else { continue };

            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| p.inner.node.is_some())
                .collect();
            let contribs = backward(&grad_out, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                let (Some(pn), Some(c)) = (&parent.inner.node, contrib) else {
                    continue;
                };
                if !all_finite(&c) {
                    return Err(FireError::NonFinite { op: "backward" });
                }
                let mut slot = pn.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), c.len());
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn ensure_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FireError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let w = Tensor::<f64>::param(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let loss = w.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient_is_2w() {
        let w = Tensor::<f64>::param(&[2], vec![1.0, -2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let w = Tensor::<f64>::param(&[2], vec![3.0, 5.0]).unwrap();
        // loss = sum(w) + sum(w) -> grad 2 everywhere
        let loss = w.sum().unwrap().add(&w.sum().unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = w.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let w = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(!y.is_tracked());
    }

    #[test]
    fn non_finite_data_is_rejected() {
        assert!(Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::new(&[1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn shape_data_disagreement_is_rejected() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
