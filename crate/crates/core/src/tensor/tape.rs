use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradient contributions from the output gradient.
/// The mask tells which parents actually need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf (gradient is collected for it).
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.insert(t.shape().to_vec(), t.data().to_vec(), true, Vec::new(), None)
    }

    /// Records a constant leaf.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.insert(t.shape().to_vec(), t.data().to_vec(), false, Vec::new(), None)
    }

    /// Records a constant leaf from raw parts.
    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} does not hold {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.insert(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.insert(vec![1], vec![v], false, Vec::new(), None)
    }

    fn insert(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records the result of an op. The backward closure is dropped when no
    /// parent needs a gradient.
    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let parent_ids = parents.iter().map(|p| p.id).collect();
        if requires_grad {
            self.insert(shape, value, true, parent_ids, Some(backward))
        } else {
            self.insert(shape, value, false, parent_ids, None)
        }
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes[loss.id].value.len();
        if n != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let contributions = backward(&g, &mask);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for ((&parent, contribution), needed) in
                node.parents.iter().zip(contributions).zip(mask)
            {
                let (Some(c), true) = (contribution, needed) else {
                    continue;
                };
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

/// Parameters of a store bound as leaves on one tape, in store order.
pub struct BoundParams<'t, T: Scalar = f32> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub(crate) fn new(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, slot: usize) -> Var<'t, T> {
        self.vars[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Var<'t, T>> {
        self.vars.iter()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.value_of(self.id).len()
    }

    pub fn value(&self) -> Rc<Vec<T>> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// First element; meant for scalars.
    pub fn item(&self) -> T {
        self.value()[0]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&self.shape(), self.value().as_ref().clone()).expect("consistent node")
    }
}
