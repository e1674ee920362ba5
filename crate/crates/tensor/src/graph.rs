use std::cell::RefCell;
use std::sync::Arc;

use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &mut GradSink<'_, F>)>;

struct Node<F> {
    value: Arc<Tensor<F>>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Reverse-mode tape. Ops append nodes; [`Graph::backward`] walks them in
/// reverse. A graph built with [`Graph::no_grad`] records values only.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    record: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node sharing the caller's buffer.
    pub fn leaf(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad: requires_grad && self.record, backward: None });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<F>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn push<B>(&self, value: Tensor<F>, parents: &[Var], backward: B) -> Var
    where
        B: Fn(&Tensor<F>, &mut GradSink<'_, F>) + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let rg = self.record && parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<F>> = if rg { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Arc::new(value), requires_grad: rg, backward });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with one.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward requires a scalar loss");
        let req: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if !req[loss.0] {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(bw) = nodes[i].backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            {
                let mut sink = GradSink { grads: &mut grads, req: &req };
                bw(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a, F> {
    grads: &'a mut Vec<Option<Tensor<F>>>,
    req: &'a [bool],
}

impl<F: Float> GradSink<'_, F> {
    pub fn wants(&self, v: Var) -> bool {
        self.req[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    pub fn buf(&mut self, v: Var, shape: &[usize]) -> &mut [F] {
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        slot.as_mut().unwrap().data_mut()
    }

    pub fn add(&mut self, v: Var, g: Tensor<F>) {
        if !self.req[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
