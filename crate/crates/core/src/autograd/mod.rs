//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the tape in reverse and returns gradients for the
//! parameters that were read through [`Ctx::param`]. Inference uses a tape in
//! [`GradMode::Disabled`], which keeps values but records no closures.

mod conv;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub use conv::conv_output_dims;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Enabled,
    Disabled,
}

pub struct Tape<T> {
    mode: GradMode,
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Sum another gradient set into this one (mini-batch accumulation).
    pub fn accumulate(&mut self, other: Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<T>()
            .sqrt()
    }

    pub fn empty() -> Self {
        Gradients { grads: Vec::new() }
    }
}

impl<T: Float> Tape<T> {
    pub fn new(mode: GradMode) -> Self {
        Tape {
            mode,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn training() -> Self {
        Self::new(GradMode::Enabled)
    }

    pub fn inference() -> Self {
        Self::new(GradMode::Disabled)
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.mode == GradMode::Enabled,
            parents: Vec::new(),
            backward: None,
            param,
        });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push_leaf(Arc::new(value), false, None);
        Var { tape: self, id }
    }

    /// A differentiable input that is not a stored parameter (used by gradient checks).
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push_leaf(Arc::new(value), true, None);
        Var { tape: self, id }
    }

    pub fn param<'t>(&'t self, store: &ParamStore<T>, id: ParamId) -> Var<'t, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let node = self.push_leaf(store.shared(id), true, Some(id));
        self.param_nodes.borrow_mut().insert(id, node);
        Var { tape: self, id: node }
    }

    pub(crate) fn push_op<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.mode == GradMode::Enabled && parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            param: None,
        });
        let id = nodes.len() - 1;
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    #[cfg(test)]
    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        self.backward_with_inputs(loss).0
    }

    /// Like [`Tape::backward`] but also returns gradients of [`Tape::input`] leaves by node id.
    pub fn backward_with_inputs(&self, loss: Var<'_, T>) -> (Gradients<T>, HashMap<usize, Tensor<T>>) {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        let max_param = nodes.iter().filter_map(|n| n.param).map(|p| p.0 + 1).max().unwrap_or(0);
        let mut out = Gradients {
            grads: vec![None; max_param],
        };
        let mut inputs = HashMap::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match (&node.backward, node.param) {
                (Some(f), _) => {
                    let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = f(&g, &need);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                        let Some(pg) = pg else { continue };
                        if !needed {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                (None, Some(pid)) => out.grads[pid.0] = Some(g),
                (None, None) => {
                    inputs.insert(i, g);
                }
            }
        }
        (out, inputs)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    /// The recorded value (shared, cheap to clone).
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

/// Everything a module needs to run a forward pass: the tape to record on and
/// the parameter values to read.
pub struct Ctx<'t, T> {
    pub tape: &'t Tape<T>,
    pub params: &'t ParamStore<T>,
}

impl<T> Clone for Ctx<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Ctx<'_, T> {}

impl<'t, T: Float> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>) -> Self {
        Ctx { tape, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }
}
