use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::ArrayD;

use crate::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Every op evaluates eagerly and, when the graph is recording and at least one
/// input requires a gradient, stores a closure producing the vector-Jacobian
/// product for its inputs. An inference graph never stores closures, so
/// intermediate inputs are released as soon as callers drop them.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that records values but never gradients.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: ArrayD<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.recording,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: ArrayD<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an op result. `make_backward` is only invoked when a gradient can
    /// flow through this node.
    pub(crate) fn push<F>(&self, value: ArrayD<T>, parents: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let backward = if requires_grad {
            Some(make_backward())
        } else {
            None
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as the root value).
    /// Returns the accumulated gradients of every leaf that requires one.
    pub fn backward(&self, root: Var, seed: ArrayD<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.shape(),
            seed.shape(),
            "seed gradient shape must match the root value"
        );
        let mut pending: Vec<Option<ArrayD<T>>> = Vec::with_capacity(root.0 + 1);
        pending.resize_with(root.0 + 1, || None);
        pending[root.0] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut pending[p] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }

    /// Backward from a scalar root with seed 1.
    pub fn backward_scalar(&self, root: Var) -> Gradients<T> {
        let shape = self.shape(root);
        assert_eq!(shape.iter().product::<usize>(), 1, "root must hold one element");
        self.backward(root, ArrayD::from_elem(shape, T::one()))
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    leaves: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.leaves.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
