use std::collections::HashMap;

use super::tape::{Gradients, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
    /// Accumulated gradient; cleared by the optimizer step.
    pub grad: Option<Tensor<T>>,
}

/// Named learnable tensors of a model, kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, ids: &[ParamId], frozen: bool) {
        for &id in ids {
            self.params[id.0].frozen = frozen;
        }
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copy gradients out of a finished backward pass into every unfrozen
    /// parameter that was bound on `tape`. Parameters the loss does not
    /// depend on receive zeros.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.bound_params() {
            let param = &mut self.params[id.0];
            if param.frozen {
                continue;
            }
            let incoming = grads.get(var);
            match (&mut param.grad, incoming) {
                (Some(acc), Some(g)) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                (Some(_), None) => {}
                (slot @ None, Some(g)) => *slot = Some(g.clone()),
                (slot @ None, None) => *slot = Some(Tensor::zeros(param.tensor.shape())),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.id("a.w"), Some(ParamId(0)));
    }
}
