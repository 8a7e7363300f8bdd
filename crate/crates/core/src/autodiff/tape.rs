//! Wengert list: every primitive application is appended in execution order,
//! so the node vector is already topologically sorted.

use crate::autodiff::array::NdArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one primitive.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adds `grad_out · ∂output/∂input_i` into `grads[i]` for every input
    /// whose slot is `Some`. Slots arrive zero-filled.
    fn backward(
        &self,
        inputs: &[&NdArray<T>],
        output: &NdArray<T>,
        grad_out: &[T],
        grads: &mut [Option<Vec<T>>],
    );
}

struct Node<T: Scalar> {
    value: NdArray<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
    all_masked_rows: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            all_masked_rows: 0,
        }
    }

    /// A tape that keeps values but records no backward rules.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.all_masked_rows = 0;
    }

    /// Leaf node. `requires_grad` is ignored on an inference tape.
    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax rows whose every entry was masked since the last reset.
    pub fn all_masked_rows(&self) -> usize {
        self.all_masked_rows
    }

    pub(crate) fn flag_all_masked(&mut self, rows: usize) {
        self.all_masked_rows += rows;
    }

    /// Appends the result of a primitive.
    pub fn push(&mut self, value: NdArray<T>, inputs: &[Var], rule: impl Backward<T> + 'static) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once; call
    /// [`Tape::reset`] before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape; reset it first"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g_out) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&NdArray<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let mut slots: Vec<Option<Vec<T>>> = node
                .inputs
                .iter()
                .map(|v| {
                    let n = &self.nodes[v.0];
                    n.requires_grad.then(|| vec![T::zero(); n.value.len()])
                })
                .collect();
            rule.backward(&inputs, &node.value, &g_out, &mut slots);
            for (v, slot) in node.inputs.iter().zip(slots) {
                let Some(g) = slot else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    empty => *empty = Some(g),
                }
            }
        }
        // interior gradients were consumed above; only leaves keep theirs
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if node.rule.is_some() {
                *g = None;
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
    /// Gradient of `v`; zeros when the loss did not depend on it.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> NdArray<T> {
        let shape = tape.shape(v);
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => NdArray::new(shape, g.clone()).expect("gradient matches value shape"),
            None => NdArray::zeros(shape),
        }
    }

    pub fn take(&mut self, tape: &Tape<T>, v: Var) -> NdArray<T> {
        let shape = tape.shape(v).to_vec();
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => NdArray::new(&shape, g).expect("gradient matches value shape"),
            None => NdArray::zeros(&shape),
        }
    }
}
