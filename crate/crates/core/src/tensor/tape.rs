//! Record-then-replay reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and, when any input needs
//! a gradient, a closure mapping the output gradient to input gradients.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because nodes can only reference earlier nodes.

use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Param(ParamId),
    Input,
    Op(&'static str),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    origin: Origin,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    validate: bool,
    input_grads: HashMap<usize, Tensor<T>>,
    /// Digest of every branch taken by piecewise ops, when enabled.
    branches: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, validate: false, input_grads: HashMap::new(), branches: None }
    }

    /// Tape for inference: values only, nothing is differentiable.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    /// Turns on the finiteness check after every op.
    pub fn with_validation(mut self, on: bool) -> Self {
        self.validate = on;
        self
    }

    /// Records which side of each kink ReLU and max-pool take, so two
    /// evaluations can be checked for lying on the same smooth piece.
    pub fn with_branch_trace(mut self) -> Self {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn branch_trace(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn trace_branches(&mut self, taken: impl Iterator<Item = u64>) {
        if let Some(h) = &mut self.branches {
            for t in taken {
                *h = (*h ^ t).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.input_grads.clear();
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), Origin::Input, false)
    }

    /// Input whose gradient is kept and readable through [`Tape::grad`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let rg = self.recording;
        self.leaf(Arc::new(value), Origin::Input, rg)
    }

    /// Leaf bound to a stored parameter. Buffers never require a gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = self.recording && p.learnable();
        self.leaf(p.shared_value(), Origin::Param(id), rg)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, origin, requires_grad, parents: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn shared(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for an input created with [`Tape::input_with_grad`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.input_grads.get(&v.0)
    }

    /// Records an op result. `backward` is only kept when some parent needs a
    /// gradient.
    pub fn push_op<F>(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
    {
        if self.validate {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite { op, index });
            }
        }
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = requires_grad.then(|| Box::new(backward) as BackwardFn<T>);
        self.nodes.push(Node {
            value: Arc::new(value),
            origin: Origin::Op(op),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf, accumulating
    /// into parameter gradient buffers and input gradients. Calling it twice
    /// accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                loss_value.shape()
            )));
        }
        let mut touched = vec![false; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                touched[i] = true;
                let node = &self.nodes[i];
                match node.origin {
                    Origin::Param(id) => store.get_mut(id).accumulate_grad(&g),
                    Origin::Input => match self.input_grads.get_mut(&i) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            self.input_grads.insert(i, g);
                        }
                    },
                    Origin::Op(_) => {
                        let Some(bw) = &node.backward else { continue };
                        let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
                        let parent_grads = bw(&g, &needs);
                        debug_assert_eq!(parent_grads.len(), node.parents.len());
                        for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                            let Some(pg) = pg.filter(|_| need) else { continue };
                            match &mut grads[p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        } else {
            log::warn!("backward: loss does not depend on any parameter or differentiable input");
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Origin::Param(id) = node.origin {
                if node.requires_grad && !touched[i] {
                    log::warn!("backward: parameter `{}` is disconnected from the loss", store.get(id).name());
                    store.get_mut(id).ensure_grad();
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: operand shapes differ, {sa} vs {sb}")));
        }
        Ok(())
    }

    /// `out[i] = a[i] * b[i]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.shared(a), self.shared(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().clone(), data)?;
        self.push_op("mul", out, &[a, b], move |g, needs| {
            let prod = |other: &Tensor<T>| {
                let data = g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
                Tensor { shape: g.shape().clone(), data }
            };
            vec![needs[0].then(|| prod(&bv)), needs[1].then(|| prod(&av))]
        })
    }

    /// `out[i] = a[i] + b[i]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().clone(), data)?;
        self.push_op("add", out, &[a, b], |g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().clone();
        let out = Tensor::scalar(xv.sum());
        self.push_op("sum", out, &[x], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push_op("scale", out, &[x], move |g, _| vec![Some(g.map(|v| v * factor))])
    }
}
