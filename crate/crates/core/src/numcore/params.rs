use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Index of a parameter inside its [`Parameters`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, name-unique collection of trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }
}

/// One plain SGD update: optional global-norm clipping, then `value -= lr * grad`.
///
/// Gradients are left in place (scaled if clipping fired); the caller zeroes them.
pub fn sgd_step(params: &mut Parameters, learning_rate: f64, clip_norm: Option<f64>) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {learning_rate}")));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    if let Some(max_norm) = clip_norm {
        if !(max_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be > 0, got {max_norm}")));
        }
        let norm = params.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for p in params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    for p in params.iter_mut() {
        let Parameter { value, grad, .. } = p;
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= learning_rate * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], grads: &[f64]) -> Parameters {
        let mut ps = Parameters::new();
        let id = ps.insert("w", Tensor::vector(values.to_vec())).unwrap();
        ps.get_mut(id).grad = Tensor::vector(grads.to_vec());
        ps
    }

    #[test]
    fn plain_step() {
        let mut ps = store(&[5.0], &[2.0]);
        sgd_step(&mut ps, 1.0, None).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.data(), &[3.0]);
    }

    #[test]
    fn clip_at_boundary_is_noop() {
        let mut ps = store(&[0.0, 0.0], &[3.0, 4.0]);
        sgd_step(&mut ps, 1.0, Some(5.0)).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.data(), &[-3.0, -4.0]);
    }

    #[test]
    fn clip_scales_then_subtracts() {
        let mut ps = store(&[0.0, 0.0], &[6.0, 8.0]);
        sgd_step(&mut ps, 1.0, Some(5.0)).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.data(), &[-3.0, -4.0]);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut ps = store(&[0.0], &[f64::NAN]);
        let err = sgd_step(&mut ps, 1.0, None).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut ps = store(&[0.0], &[1.0]);
        assert!(sgd_step(&mut ps, 0.0, None).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = Parameters::new();
        ps.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(0.0)).is_err());
    }
}
