use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::array::Tensor;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model.
///
/// Buffers (batch-norm running statistics, stored bases) live here too with
/// `trainable == false`, so that a checkpoint is just the store.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    trainable: bool,
    locked: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Locked parameters can never become trainable.
    pub fn locked(&self) -> bool {
        self.locked
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` already exists")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("parameter insert"));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
            locked: false,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.by_name(name)?.value)
    }

    /// Replace a value, keeping the shape. Locked parameters are immutable.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.locked {
            return Err(Error::invalid(format!("parameter `{name}` is locked")));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("set_value"));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if trainable && p.locked {
            return Err(Error::invalid(format!(
                "parameter `{name}` is locked and cannot be trained"
            )));
        }
        p.trainable = trainable;
        Ok(())
    }

    /// Permanently freeze a parameter.
    pub fn lock(&mut self, name: &str) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        p.trainable = false;
        p.locked = true;
        Ok(())
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("`{}` is {:?}, grad {:?}", p.name, p.value.shape(), grad.shape()),
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor<T>>> {
        Ok(self.by_name(name)?.grad.as_ref())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Remove a parameter, returning its value.
    pub fn remove(&mut self, name: &str) -> Result<Tensor<T>> {
        let id = self.id(name)?;
        let p = self.params.remove(id.0);
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        Ok(p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    /// Names sorted lexicographically.
    pub fn sorted_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names
    }

    /// SHA-256 over every value in name order. Grads are ignored.
    pub fn state_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for name in self.sorted_names() {
            let p = &self.params[self.index[name].0];
            hasher.update(name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(p.value.le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locked_parameter_cannot_be_unfrozen() {
        let mut store = ParamStore::<f32>::new();
        store.insert("bank", Tensor::zeros([2, 2]), true).unwrap();
        store.lock("bank").unwrap();
        assert!(!store.by_name("bank").unwrap().trainable());
        assert!(store.set_trainable("bank", true).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros([1]), true).unwrap();
        assert!(store.insert("a", Tensor::zeros([1]), true).is_err());
    }

    #[test]
    fn grad_shape_checked() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("a", Tensor::zeros([2]), true).unwrap();
        assert!(store.set_grad(id, Tensor::zeros([3])).is_err());
        assert!(store.set_grad(id, Tensor::zeros([2])).is_ok());
    }
}
