//! Dense row-major `f64` tensors with a dynamically recorded reverse-mode graph.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every operation whose
//! inputs require a gradient records its parents and a backward closure; when no
//! input requires a gradient the result is a plain constant and nothing is kept
//! alive. [`Tensor::backward`] walks the graph from a scalar loss and stores
//! accumulated gradients on the leaves that requested them.
//!
//! Graphs are `!Send` by construction (`Rc`), so a graph and its tensors stay on
//! the thread that built them.

mod conv;
mod functional;
mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

pub use conv::Conv2dOptions;
pub use ops::{sigmoid, softplus};
pub use functional::{BCE_EPS, KL_EPS, NORMALIZATION_TOL};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP, NOISE_FLOOR};

/// Computes one gradient per parent from the gradient of the node's output.
/// `None` means "no contribution" (typically a parent that does not require grad).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
            op,
        }))
    }

    /// Constant tensor. Every extent must be positive.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        if numel_of(shape) != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, vec![], None, "const"))
    }

    /// Leaf tensor that receives a gradient on `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(t.requiring_grad())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![1], vec![v], false, vec![], None, "const")
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor> {
        Tensor::new(shape, vec![v; numel_of(shape)])
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// A fresh leaf with the same values; drops any recorded history.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false, vec![], None, "const")
    }

    /// A fresh leaf with the same values that requires grad.
    pub fn requiring_grad(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), true, vec![], None, "leaf")
    }

    /// Records an operation result. Parents and the backward closure are only kept
    /// when at least one parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op: &'static str,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::build(shape, data, true, parents, Some(Box::new(backward)), op)
        } else {
            Tensor::build(shape, data, false, vec![], None, op)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse pass from a scalar loss. Gradients accumulate on every reachable
    /// leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order()?;
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size for op {}", node.0.op);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require grad (parents before children).
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: HashMap<u64, Mark> = HashMap::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        marks.insert(self.id(), Mark::Open);
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if !parent.requires_grad() {
                    continue;
                }
                match marks.get(&parent.id()) {
                    Some(Mark::Open) => return Err(Error::GraphCycle),
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(parent.id(), Mark::Open);
                        stack.push((parent, 0));
                    }
                }
            } else {
                marks.insert(node.id(), Mark::Done);
                order.push(node);
            }
        }
        Ok(order)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    ))
}
