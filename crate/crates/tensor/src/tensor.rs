use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Float;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Computes the gradient of each parent from the output gradient.
///
/// Arguments are `(grad_out, out_data, parents)`. A `None` entry means the
/// parent receives no gradient from this node.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major tensor that records the operations producing it.
///
/// Cloning is cheap (reference counted). Tensors are immutable; every
/// operation allocates its output.
pub struct Tensor<T: Float> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), data, false, None)
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(vec![T::one(); numel(shape)], shape)
    }

    pub fn full(value: T, shape: &[usize]) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[])
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Self {
        Self::new(data.iter().map(|&v| T::c(v)).collect(), shape)
    }

    /// Builds the output of a differentiable operation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Self::from_node(shape, data, requires_grad, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::new(self.node.data.clone(), &self.node.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another element type; the result is a constant.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::new(
            self.node.data.iter().map(|v| U::c(v.f64())).collect(),
            &self.node.shape,
        )
    }

    /// Reverse-mode differentiation of a scalar tensor.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.numel(), 1, "backward() requires a scalar, got {:?}", self.shape());
        let mut grads = Gradients { map: HashMap::new() };
        if !self.requires_grad() {
            return grads;
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        grads.map.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(gf) = &t.node.grad_fn else { continue };
            let Some(g) = grads.map.get(&t.id()) else { continue };
            let parent_grads = (gf.backward)(g, &t.node.data, &gf.parents);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            // Interior node gradients are no longer needed once propagated.
            if t.node.grad_fn.is_some() && t.id() != self.id() {
                grads.map.remove(&t.id());
            }
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.map.get_mut(&p.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(pg) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.map.insert(p.id(), pg);
                    }
                }
            }
        }
        grads.map.remove(&self.id());
        if !self.node.grad_fn.is_some() {
            grads.map.insert(self.id(), vec![T::one()]);
        }
        grads
    }
}

/// Gradients of leaf tensors produced by [`Tensor::backward`].
pub struct Gradients<T> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn remove(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.map.remove(&t.id())
    }
}
