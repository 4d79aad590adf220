use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Identity of a graph node. Parameters keep a stable id across forwards so
/// their gradients can be looked up after [`Tensor::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

impl NodeId {
    pub fn fresh() -> Self {
        NodeId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Vector-Jacobian product: given the gradient of the output and the output
/// values, returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: NodeId,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// An immutable dense tensor, optionally attached to an autograd graph.
pub struct Tensor<T: Scalar = f32> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Constant leaf, never receives a gradient.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(data), shape, false, NodeId::fresh())
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn variable(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(data), shape, true, NodeId::fresh())
    }

    pub(crate) fn leaf(
        data: Arc<Vec<T>>,
        shape: &[usize],
        requires_grad: bool,
        id: NodeId,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            node: Arc::new(Node {
                id,
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad_fn: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![T::zero(); n], shape).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![value; n], shape).expect("consistent shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[]).expect("scalar")
    }

    /// Builds the result of an operation. The gradient closure is only kept
    /// when at least one input participates in autograd.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { inputs, backward });
        Tensor {
            node: Arc::new(Node {
                id: NodeId::fresh(),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn id(&self) -> NodeId {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.node.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(TensorError::Invalid {
                op: "dims4",
                msg: format!("expected a 4-d tensor, got {s:?}"),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.node.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::leaf(self.shared_data(), self.shape(), false, NodeId::fresh())
            .expect("detach keeps shape")
    }

    /// Reverse-mode sweep from a scalar. Returns the gradients of every leaf
    /// that requires one.
    pub fn backward(&self) -> Result<Grads<T>> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        self.backward_with(vec![T::one()])
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<Grads<T>> {
        if seed.len() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward_with",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return Ok(grads);
        }
        let order = self.topo_order();
        let mut pending: HashMap<NodeId, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => accumulate(&mut grads.map, t.id(), g),
                Some(gf) => {
                    let input_grads = (gf.backward)(&g, t.data());
                    debug_assert_eq!(input_grads.len(), gf.inputs.len());
                    for (input, ig) in gf.inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            if input.requires_grad() {
                                debug_assert_eq!(ig.len(), input.len());
                                accumulate(&mut pending, input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Post-order over the subgraph that requires gradients.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<NodeId> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Scalar>(map: &mut HashMap<NodeId, Vec<T>>, id: NodeId, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => {
            map.insert(id, g);
        }
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Grads<T: Scalar> {
    map: HashMap<NodeId, Vec<T>>,
}

impl<T: Scalar> Default for Grads<T> {
    fn default() -> Self {
        Grads {
            map: HashMap::new(),
        }
    }
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.get_id(t.id())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[T]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn remove_id(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Grads<T>) {
        for (id, g) in other.map {
            accumulate(&mut self.map, id, g);
        }
    }
}
