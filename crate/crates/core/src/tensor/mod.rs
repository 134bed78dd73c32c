//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its parents and a backward closure on the produced
//! tensor. `Tensor::backward` walks the graph in reverse topological order and
//! accumulates gradients into leaf tensors created with [`Tensor::param`].
//! Values are immutable once produced; only gradient buffers mutate.
//!
//! All arithmetic is 64-bit. Forward operations on finite inputs must produce
//! finite outputs; every op checks this and reports `Error::NonFinite`
//! otherwise, which is what turns a diverging training step into a clean
//! abort instead of a NaN cascade.

mod ops;
mod sample;

pub mod gradcheck;

pub use gradcheck::finite_diff_gradient;
pub use ops::{concat_cols, concat_rows};
pub use sample::{bilinear_sample, conv2d};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

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

/// Backward closure: given the output gradient and the produced tensor,
/// return one gradient buffer per parent (`None` for parents that do not
/// track gradients).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &Inner) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True when a gradient can flow to or through this tensor.
    track: bool,
    /// Persistent gradient buffer. Populated for leaves by `backward`;
    /// repeated backward calls accumulate.
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional array in row-major order.
///
/// Cloning is cheap (reference-counted); values are shared and immutable.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("track", &self.inner.track)
            .field("values", &self.inner.values)
            .finish()
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, values, false)
    }

    /// Leaf tensor that collects gradients.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, values, true)
    }

    fn build(shape: &[usize], values: Vec<f64>, track: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, values.len()),
            ));
        }
        check_finite("tensor", &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                values,
                track,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).expect("scalar is always valid")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros is always valid")
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        check_finite(op, &values)?;
        let track = parents.iter().any(|p| p.inner.track);
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                track,
                grad: RefCell::new(None),
                // Untracked results keep neither parents nor closure, so
                // inference builds no graph.
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    /// Whether gradients flow to or through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.inner.track
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.values[0]
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant view of the same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                values: self.inner.values.clone(),
                track: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Number of rows when the tensor is viewed as a matrix whose row length
    /// is the last dimension. A 1-D tensor is a single row.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let shape = &self.inner.shape;
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => {
                let cols = shape[shape.len() - 1];
                (self.numel() / cols.max(1), cols)
            }
        }
    }

    /// Reverse-mode differentiation from a scalar.
    ///
    /// Gradients of leaf tensors accumulate into their `grad` buffers;
    /// calling twice without `clear_grad` doubles them. Intermediate
    /// gradients live only for the duration of the call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.inner.track {
            return Ok(()); // nothing reachable collects gradients
        }

        // Post-order DFS, iterative to keep deep graphs off the call stack.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id, ());
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.inner.parents[child].clone();
                if parent.inner.track && !visited.contains_key(&parent.inner.id) {
                    visited.insert(parent.inner.id, ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Transient gradients for interior nodes; leaves flush to their
        // persistent buffers at the end.
        let mut flow: HashMap<u64, Vec<f64>> = HashMap::new();
        flow.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(dout) = flow.remove(&node.inner.id) else {
                continue;
            };
            match &node.inner.backward {
                Some(bfn) => {
                    let grads = bfn(&dout, &node.inner);
                    debug_assert_eq!(grads.len(), node.inner.parents.len());
                    for (parent, grad) in node.inner.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.inner.track {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), parent.numel());
                        match flow.get_mut(&parent.inner.id) {
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grad) {
                                    *a += g;
                                }
                            }
                            None => {
                                flow.insert(parent.inner.id, grad);
                            }
                        }
                    }
                }
                None => {
                    // Leaf: persist.
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&dout) {
                                *a += g;
                            }
                        }
                        None => *slot = Some(dout),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Values of the produced tensor, visible to backward closures.
impl Inner {
    pub(crate) fn out_values(&self) -> &[f64] {
        &self.values
    }
    pub(crate) fn parent_values(&self, i: usize) -> &[f64] {
        &self.parents[i].inner.values
    }
    pub(crate) fn parent_tracks(&self, i: usize) -> bool {
        self.parents[i].inner.track
    }
}
