use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its accumulated gradient and momentum.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    momentum: Vec<f64>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Momentum buffer; empty (all zeros) until the first update.
    pub fn momentum(&self) -> &[f64] {
        &self.momentum
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value: Arc::new(value), grad: None, momentum: Vec::new() });
        Ok(id)
    }

    /// Xavier/Glorot uniform initialization: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("parameter `{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Cheap copy of every parameter value.
    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.params.iter().map(|p| Arc::clone(&p.value)).collect()
    }

    /// Puts back values taken by [`ParamStore::snapshot`].
    pub fn restore(&mut self, values: &[Arc<Tensor>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid(format!("snapshot has {} values, store {}", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = Arc::clone(v);
        }
        Ok(())
    }

    /// Gives every listed parameter without a gradient an explicit zero one,
    /// for parameters the current loss does not touch.
    pub fn zero_missing_grads(&mut self, ids: &[ParamId]) {
        for id in ids {
            let p = &mut self.params[id.0];
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("parameter `{}` has {} values, gradient {}", p.name, p.value.len(), grad.len()),
            ));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sum of squared weights over the given parameters.
    pub fn squared_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|id| self.params[id.0].value.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classical momentum SGD with the L2 penalty folded into the gradient:
/// `buf = m*buf + grad + wd*param; param -= lr*buf`. Gradients are
/// cleared afterwards. Nothing is updated if any parameter lacks a gradient.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], cfg: SgdConfig) -> Result<()> {
    if let Some(missing) = ids.iter().find(|id| store.params[id.0].grad.is_none()) {
        return Err(Error::MissingGradient(store.params[missing.0].name.clone()));
    }
    for id in ids {
        let p = &mut store.params[id.0];
        let grad = p.grad.take().expect("checked above");
        if p.momentum.is_empty() {
            p.momentum = vec![0.0; grad.len()];
        }
        let value = Arc::make_mut(&mut p.value);
        for ((w, b), g) in value.data_mut().iter_mut().zip(p.momentum.iter_mut()).zip(&grad) {
            *b = cfg.momentum * *b + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *b;
        }
    }
    Ok(())
}
