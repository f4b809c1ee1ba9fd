//! Named, constrained trainable parameters.
//!
//! All model weights live in a flat [`ParamStore`]; model structs hold
//! [`ParamId`] handles. Constraints are enforced by projection after every
//! optimizer step.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("parameter {name:?}: stored shape {stored:?} != expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Value constraint, re-established by projection after each update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    None,
    NonNegative,
    LowerBounded(f64),
}

impl Constraint {
    pub fn project(&self, v: f64) -> f64 {
        match self {
            Constraint::None => v,
            Constraint::NonNegative => v.max(0.0),
            Constraint::LowerBounded(lo) => v.max(*lo),
        }
    }

    pub fn satisfied(&self, v: f64) -> bool {
        match self {
            Constraint::None => true,
            Constraint::NonNegative => v >= 0.0,
            Constraint::LowerBounded(lo) => v >= *lo,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        mut tensor: Tensor,
        constraint: Constraint,
    ) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        tensor.requires_grad = true;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            constraint,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.params[id.0].tensor.data.len());
        self.params[id.0].tensor.data = data;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Iterates parameters in registration order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        self.params[id.0].tensor.accumulate_grad(delta);
    }

    /// Projects every parameter back onto its constraint set.
    pub fn project_all(&mut self) {
        for p in &mut self.params {
            match p.constraint {
                Constraint::None => {}
                c => {
                    for v in &mut p.tensor.data {
                        *v = c.project(*v);
                    }
                }
            }
        }
    }

    /// Verifies every constrained parameter satisfies its constraint.
    pub fn check_constraints(&self) -> Result<(), String> {
        for p in &self.params {
            for (i, v) in p.tensor.data.iter().enumerate() {
                if !p.constraint.satisfied(*v) {
                    return Err(format!(
                        "parameter {:?} violates {:?} at index {i}: {v}",
                        p.name, p.constraint
                    ));
                }
            }
        }
        Ok(())
    }
}
