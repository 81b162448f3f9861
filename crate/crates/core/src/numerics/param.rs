use super::{Array, Scalar};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub grad: Array<T>,
}

/// Ordered collection of parameters owned by one model replica.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let grad = Array::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &[Array<T>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(shape_err(
                "accumulate",
                format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> T {
        let mut s = T::zero();
        for p in &self.params {
            for &g in p.grad.data() {
                s += g * g;
            }
        }
        s.sqrt()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
        }
    }
}
