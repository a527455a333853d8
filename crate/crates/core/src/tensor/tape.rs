use super::{ParamId, ParamStore, Real, Tensor};
use crate::prelude::*;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded op: maps the output gradient to one gradient
/// per input. Entries for inputs with `needs[i] == false` may be `None`.
pub(crate) trait Backward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

enum Kind<T: Real> {
    Leaf { param: Option<ParamId> },
    Op { inputs: Vec<Var>, rule: Box<dyn Backward<T>> },
}

struct Node<'a, T: Real> {
    value: Value<'a, T>,
    requires_grad: bool,
    kind: Kind<T>,
}

/// Define-by-run record of executed ops.
///
/// Nodes are appended in execution order, so inputs always precede the ops
/// that consume them. A tape supports exactly one [`backward`](Tape::backward)
/// pass, after which it is cleared.
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient w.r.t. a leaf created with [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Borrowed leaf for a stored parameter; tracks gradients when the
    /// parameter does.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(Value::Borrowed(&p.value), p.requires_grad, Some(id))
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn frozen(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Value::Borrowed(value), false, None)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(value), false, None)
    }

    /// Owned leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(value), true, None)
    }

    fn push_leaf(&mut self, value: Value<'a, T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, requires_grad, kind: Kind::Leaf { param } });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Appends an op output. The backward rule is only built when some input
    /// tracks gradients.
    pub(crate) fn record<B, F>(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], rule: F) -> Result<Var>
    where
        B: Backward<T> + 'static,
        F: FnOnce() -> B,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.any_requires_grad(inputs);
        let kind = if requires_grad {
            Kind::Op { inputs: inputs.to_vec(), rule: Box::new(rule()) }
        } else {
            Kind::Leaf { param: None }
        };
        self.nodes.push(Node { value: Value::Owned(value), requires_grad, kind });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse-mode differentiation from a one-element `loss` and
    /// consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::ones(&seed_shape));

        let mut out = Gradients { params: Vec::new(), inputs: Vec::new() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if let Kind::Leaf { param: None } = node.kind {
                    out.inputs.push((Var(i), Tensor::zeros(self.value(Var(i)).shape())));
                }
                continue;
            };
            match &node.kind {
                Kind::Leaf { param: Some(id) } => out.params.push((*id, g)),
                Kind::Leaf { param: None } => out.inputs.push((Var(i), g)),
                Kind::Op { inputs, rule } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                    let input_grads = rule.backward(&values, self.value(Var(i)), &g, &needs);
                    for ((&v, ig), need) in inputs.iter().zip(input_grads).zip(needs) {
                        let Some(ig) = ig else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(ig.shape(), self.value(v).shape());
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        // a parameter may enter the tape more than once (tied weights)
        let mut merged: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (id, g) in out.params.drain(..) {
            match merged.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    merged.insert(id, g);
                }
            }
        }
        out.params = merged.into_iter().collect();
        Ok(out)
    }
}
