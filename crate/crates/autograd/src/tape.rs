use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::{Error, Real, Result, Tensor};

/// Computes the gradient of each parent from the gradient of the output.
/// Entries may be `None` for parents that do not need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    tracked: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes whose inputs are all constants are stored without a backward closure,
/// so an untracked tape is plain eager evaluation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value: Rc::new(value), tracked: true, parents: Vec::new(), backward: None })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value: Rc::new(value), tracked: false, parents: Vec::new(), backward: None })
    }

    pub fn is_tracked(&self, v: Var<'_, T>) -> bool {
        self.nodes.borrow()[v.id].tracked
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records an operation. `backward` is dropped without being stored when
    /// none of `parents` is tracked.
    pub fn custom_op<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].tracked)
        };
        let (parents, backward): (Vec<usize>, Option<BackwardFn<T>>) = if tracked {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.push(Node { value: Rc::new(value), tracked, parents, backward })
    }

    /// True if any of `vars` needs a gradient; ops use this to skip saving state.
    pub fn any_tracked(&self, vars: &[Var<'_, T>]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.id].tracked)
    }

    /// Reverse-mode sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(&root_shape));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = None;
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of tracked leaves from one [`Tape::backward`] sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(*self)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        if !self.is_tracked() {
            return self;
        }
        self.tape.constant((*self.value()).clone())
    }

    pub(crate) fn op(
        self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        self.tape.custom_op(parents, value, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untracked_graph_stores_no_closures() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = x.square().exp();
        assert!(!y.is_tracked());
        assert!(tape.nodes.borrow().iter().all(|n| n.backward.is_none()));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(s)) if s == [2]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x.detach()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }
}
