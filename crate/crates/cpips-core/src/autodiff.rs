//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op pushes a node holding its forward value and a closure that maps
//! the node's output gradient to contributions on its parents. Parents always
//! precede children on the tape, so one reverse sweep in creation order is a
//! topological traversal. Parameter leaves remember their [`ParamId`] so
//! gradients can be exported back into the [`ParamStore`]; a parameter used
//! through several leaves (shared weights) accumulates from all of them.

use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tape, &[f64], &mut GradBuf)>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) param: Option<ParamId>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Per-node gradient buffers populated during the reverse sweep.
pub struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    pub fn add(&mut self, id: usize, delta: &[f64]) {
        match &mut self.slots[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.slots[id] = Some(delta.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: usize, delta: Vec<f64>) {
        match &mut self.slots[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => self.slots[id] = Some(delta),
        }
    }
}

/// Gradients of one backward pass, indexed by tape variable.
pub struct TapeGrads {
    slots: Vec<Option<Vec<f64>>>,
}

impl TapeGrads {
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.id).and_then(|s| s.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf with no gradient tracking of its own (gradients may still be
    /// queried from [`TapeGrads`], e.g. for inputs).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// A leaf bound to a stored parameter; the current value is copied in.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let var = self.push(value, None);
        self.nodes[var.id].param = Some(id);
        var
    }

    pub(crate) fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            param: None,
            backward,
        });
        Var { id }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].value.shape
    }

    /// Reverse sweep from a scalar loss. Returns per-variable gradients.
    pub fn backward(&self, loss: Var) -> Result<TapeGrads, AutodiffError> {
        let loss_value = &self.nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape.clone()));
        }
        let mut buf = GradBuf {
            slots: vec![None; self.nodes.len()],
        };
        buf.slots[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            if buf.slots[i].is_none() {
                continue;
            }
            if let Some(f) = self.nodes[i].backward.as_ref() {
                let g = buf.slots[i].take().expect("grad present");
                f(self, &g, &mut buf);
                buf.slots[i] = Some(g);
            }
        }
        Ok(TapeGrads { slots: buf.slots })
    }

    /// Backward pass that also accumulates parameter gradients into the
    /// store (accumulate-until-zeroed semantics).
    pub fn backward_into(
        &self,
        loss: Var,
        store: &mut ParamStore,
    ) -> Result<TapeGrads, AutodiffError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.slots[i].as_deref()) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(grads)
    }
}
