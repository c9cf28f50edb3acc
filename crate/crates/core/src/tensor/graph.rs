//! Computation tape: nodes hold forward values; backward replays the tape in
//! reverse, accumulating gradients into per-node slots.

use super::array::{ArrayD, Element};
use super::ops::Op;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Handle to a node on a [`Graph`]. Cheap to clone; only valid for the graph
/// that produced it.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) struct Node<E> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<E>,
    pub(crate) grad: Option<Vec<E>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<E>,
}

/// Record of primitive applications in topological order.
///
/// A graph is confined to a single worker; distinct graphs may run in
/// parallel freely.
pub struct Graph<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<E>,
        requires_grad: bool,
        op: Op<E>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor { id, shape }
    }

    /// Insert a leaf holding a copy of `array`.
    pub fn leaf(&mut self, array: &ArrayD<E>, requires_grad: bool) -> Tensor {
        self.push(
            array.shape().to_vec(),
            array.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn leaf_owned(&mut self, array: ArrayD<E>, requires_grad: bool) -> Tensor {
        let shape = array.shape().to_vec();
        self.push(shape, array.into_data(), requires_grad, Op::Leaf)
    }

    pub fn value(&self, t: &Tensor) -> &[E] {
        &self.nodes[t.id].value
    }

    pub fn value_array(&self, t: &Tensor) -> ArrayD<E> {
        ArrayD::from_vec(&self.nodes[t.id].shape, self.nodes[t.id].value.clone())
    }

    pub fn scalar_value(&self, t: &Tensor) -> E {
        debug_assert_eq!(t.numel(), 1);
        self.nodes[t.id].value[0]
    }

    /// Accumulated gradient of `t`, if backward has reached it.
    pub fn grad(&self, t: &Tensor) -> Option<ArrayD<E>> {
        self.nodes[t.id]
            .grad
            .as_ref()
            .map(|g| ArrayD::from_vec(&self.nodes[t.id].shape, g.clone()))
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Visits nodes in reverse topological order exactly once; repeated calls
    /// accumulate additively into each node's grad slot.
    pub fn backward(&mut self, loss: &Tensor) -> TensorResult<()> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.id].shape.clone(),
            ));
        }
        // Tape-local gradient table for this sweep; merged into the persistent
        // slots afterwards so repeated sweeps add up.
        let mut local: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        local[loss.id] = Some(vec![E::one()]);

        for id in (0..=loss.id).rev() {
            let Some(gout) = local[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            super::ops::backward_op(self, &op, id, &gout, &mut local);
            self.nodes[id].op = op;
            // Merge into the persistent slot.
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(slot) => {
                    for (s, g) in slot.iter_mut().zip(gout.iter()) {
                        *s = *s + *g;
                    }
                }
                None => node.grad = Some(gout),
            }
        }
        Ok(())
    }
}
