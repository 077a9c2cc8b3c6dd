use std::cell::{Cell, RefCell};
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Adjoint rule: maps the output gradient to one optional gradient per
/// input. The mask says which inputs actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    shape: Vec<usize>,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Counters for every op evaluated through a tape, recorded or not.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub ops: u64,
    /// Multiply-accumulates in matrix products, convolutions and branch sums.
    pub macs: u64,
}

/// Ordered record of differentiable ops.
///
/// Values that do not depend on any gradient-requiring leaf are never
/// recorded, so a tape with no leaves is a plain evaluation context that
/// only tallies [`OpStats`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    stats: Cell<OpStats>,
    consumed: Cell<bool>,
}

/// A value living on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Tensor,
    id: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Gradient-requiring input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            value,
            id: Some(id),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value,
            id: None,
        }
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        if requires_grad {
            self.leaf(value)
        } else {
            self.constant(value)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> OpStats {
        self.stats.get()
    }

    /// Drops every recorded op so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
        self.stats.set(OpStats::default());
    }

    pub(crate) fn op<'t, F>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        macs: u64,
        backward: F,
    ) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut stats = self.stats.get();
        stats.ops += 1;
        stats.macs += macs;
        self.stats.set(stats);

        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        if inputs.iter().all(|v| v.id.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            value,
            id: Some(id),
        }
    }

    /// Replays adjoints in reverse execution order starting from a scalar.
    ///
    /// A tape can be differentiated once; call [`Tape::reset`] to reuse it.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads: Vec::new() });
        };
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let g = Tensor::from_parts(node.shape.clone(), g);
            let mask: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let contribs = backward(&g, &mask);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let (Some(j), Some(c)) = (input, contrib) else {
                    continue;
                };
                debug_assert_eq!(c.shape(), nodes[*j].shape.as_slice());
                match &mut grads[*j] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c.into_vec()),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.shape.clone(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("stats", &self.stats())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value.clone())
    }

    pub(crate) fn id(&self) -> Option<usize> {
        self.id
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{:?}({:?})", self.id, self.value)
    }
}

/// Accumulated adjoints of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id().and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
