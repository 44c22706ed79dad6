//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value,
//! its parents and a closure mapping the output gradient to parent
//! gradients. Node indices grow monotonically, so the node list is already
//! in topological order and [`Tape::backward`] is a single reverse sweep.
//! A tape can be swept once; afterwards it is stale and rejects new records.

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub(crate) use ops::same3x3;
pub use ops::{CropAnchor, Eager, Ops};

/// Maps the output gradient to one gradient per parent. The mask says which
/// parents need one; entries for the others may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    stale: Cell<bool>,
    /// FNV-1a digest of every piecewise-op branch taken, when tracking is on.
    branches: Option<Cell<u64>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            stale: Cell::new(false),
            branches: None,
        }
    }

    /// A tape that also digests the branch taken by every element of a
    /// piecewise op (ReLU side, sign of |x|, selfsim clamp). Two forward passes
    /// with equal digests ran through the same linear pieces.
    pub fn with_branch_tracking() -> Self {
        Tape {
            branches: Some(Cell::new(0xcbf2_9ce4_8422_2325)),
            ..Self::new()
        }
    }

    pub fn branch_digest(&self) -> Option<u64> {
        self.branches.as_ref().map(Cell::get)
    }

    pub(crate) fn note_branches(&self, t: &Tensor<T>, branch: impl Fn(T) -> u8) {
        if let Some(cell) = &self.branches {
            let mut h = cell.get();
            for &v in t.data() {
                h = (h ^ u64::from(branch(v))).wrapping_mul(0x0100_0000_01b3);
            }
            cell.set(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Result<Var> {
        if self.stale.get() {
            return Err(Error::StaleTape);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Ok(Var(nodes.len() - 1))
    }

    /// Leaf whose gradient [`Tape::backward`] reports.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            leaf: true,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            leaf: true,
        })
    }

    /// Records an operation output. `backward` is dropped when no parent
    /// requires a gradient.
    pub fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
            leaf: false,
        })
    }

    /// Copy of the forward value (cheap: buffers are shared).
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient-free copy of `v` as a new constant.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn is_stale(&self) -> bool {
        self.stale.get()
    }

    /// Propagates `seed` from `output` to every leaf that requires a gradient.
    /// Gradients of leaves used several times are summed.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.stale.replace(true) {
            return Err(Error::StaleTape);
        }
        let nodes = self.nodes.borrow();
        let out_dims = nodes[output.0].value.dims();
        if seed.dims() != out_dims {
            return Err(shape_err!(
                "seed {:?} does not match output {:?}",
                seed.dims(),
                out_dims
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        pending[output.0] = Some(seed);
        let mut leaves = HashMap::new();
        for idx in (0..=output.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                leaves.insert(idx, grad);
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &mask)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(g), true) = (g, needed) else {
                    continue;
                };
                if g.dims() != nodes[p].value.dims() {
                    return Err(shape_err!(
                        "backward of node {idx} produced {:?} for parent of {:?}",
                        g.dims(),
                        nodes[p].value.dims()
                    ));
                }
                pending[p] = Some(match pending[p].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
        }
        Ok(Gradients { by_node: leaves })
    }

    /// [`Tape::backward`] seeded with ones; `output` must be a scalar.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let dims = self.nodes.borrow()[output.0].value.dims();
        if dims.iter().product::<usize>() != 1 {
            return Err(shape_err!("backward_scalar on non-scalar {dims:?}"));
        }
        self.backward(output, Tensor::ones(dims))
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    /// Gradient of `v`, or zeros of `dims` when the leaf was unreachable.
    pub fn get_or_zeros(&self, v: Var, dims: crate::tensor::Dims) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}
