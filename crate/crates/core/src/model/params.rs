//! Named parameter storage and per-step binding onto a gradient tape.

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every trainable tensor of a model, in registration order. A layer used in
/// several places owns one entry, so sharing shows up as a single id.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        value.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut GradTape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Adds the tape gradients of the bound leaves to the stored gradients.
    pub fn collect_grads(&mut self, tape: &GradTape<T>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Replaces values from `(name, tensor)` pairs. Every stored parameter
    /// must be present with the same shape; all differences are reported.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut problems = Vec::new();
        let mut found = vec![None; self.tensors.len()];
        for (name, t) in entries {
            match self.names.iter().position(|n| *n == name) {
                None => problems.push(format!("  unexpected tensor {name} {:?}", t.shape())),
                Some(i) if self.tensors[i].shape() != t.shape() => problems.push(format!(
                    "  {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )),
                Some(i) => found[i] = Some(t),
            }
        }
        for (i, f) in found.iter().enumerate() {
            if f.is_none() && !problems.iter().any(|p| p.contains(&format!(" {}:", self.names[i]))) {
                problems.push(format!("  missing tensor {} {:?}", self.names[i], self.tensors[i].shape()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems.join("\n")));
        }
        for (slot, t) in self.tensors.iter_mut().zip(found) {
            let mut t = t.expect("checked above");
            t.set_requires_grad(true);
            *slot = t;
        }
        Ok(())
    }
}

/// Tape handles for the parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
