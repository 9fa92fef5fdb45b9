use std::collections::HashMap;

use super::{Float, Grads, Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, and in the handles returned by [`ParamStore::bind`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its AdamW moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers that are checkpointed but never updated by the optimizer.
    pub trainable: bool,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Float> Parameter<T> {
    fn new(name: String, value: Tensor<T>, trainable: bool) -> Self {
        let n = value.len();
        Self {
            name,
            value,
            trainable,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    /// A checkpointed tensor the optimizer leaves alone.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        ensure!(!self.index.contains_key(&name), "duplicate parameter name {name:?}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value, trainable));
        Ok(ParamId(id))
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

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Place every parameter on `graph`; the returned handles are indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Place every parameter on `graph` as a constant, for gradient-free passes.
    pub fn bind_constant(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| graph.constant(p.value.clone())).collect()
    }

    /// Same parameters in another precision (optimizer state reset).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast(), p.trainable))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// `grads[i]` belongs to parameter `i`; `None` means a zero gradient.
/// All gradients are validated before anything is written, so a divergence
/// error leaves the store untouched.
pub fn adamw_step<T: Float>(store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], opt: &AdamW) -> Result<()> {
    ensure!(
        grads.len() == store.len(),
        "{} gradients for {} parameters",
        grads.len(),
        store.len()
    );
    for (p, g) in store.params.iter().zip(grads) {
        if let Some(g) = g {
            ensure!(
                g.len() == p.value.len(),
                "gradient for {} has {} values, parameter has {}",
                p.name,
                g.len(),
                p.value.len()
            );
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }
    }
    let lr = T::from_f64(opt.lr);
    let b1 = T::from_f64(opt.beta1);
    let b2 = T::from_f64(opt.beta2);
    let eps = T::from_f64(opt.eps);
    let decay = T::one() - T::from_f64(opt.lr * opt.weight_decay);
    for (p, g) in store.params.iter_mut().zip(grads) {
        if !p.trainable {
            continue;
        }
        p.step += 1;
        let bc1 = T::from_f64(1.0 - opt.beta1.powi(p.step as i32));
        let bc2 = T::from_f64(1.0 - opt.beta2.powi(p.step as i32));
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g[i]);
            let m = b1 * p.first_moment[i] + (T::one() - b1) * gi;
            let v = b2 * p.second_moment[i] + (T::one() - b2) * gi * gi;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Collect gradients for every parameter bound with [`ParamStore::bind`].
pub fn collect_grads<T: Float>(grads: &mut Grads<T>, bound: &[Var]) -> Vec<Option<Vec<T>>> {
    bound.iter().map(|&v| grads.take(v)).collect()
}
