//! Parameter storage and the neural building blocks.

mod attention;
mod blocks;
mod layers;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_params, GradCheckReport, Graph, Real, Rng, Tensor, Var};

pub use attention::{CrossAttention, SelfAttention};
pub use blocks::{MambaBlock, TransformerLayer};
pub use layers::{dropout, sincos_1d, sincos_2d, LayerNorm, Linear};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    lookup: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    /// Truncated-normal weight (±2σ, σ = 0.02), drawn in 64-bit.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> Result<ParamId> {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.trunc_normal(INIT_STD)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), T::lit(v)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", old.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Mutable access, copying the tensor first if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Forward-pass context: a graph, lazily bound parameters, the train/eval flag
/// and the dropout stream.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Rng,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, training: bool, rng: Rng) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            training,
            rng,
        }
    }

    /// Context whose parameters are already on the graph as `vars`, one per store entry.
    pub fn prebound(g: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: &[Var], training: bool, rng: Rng) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            g,
            store,
            bound: vars.iter().copied().map(Some).collect(),
            training,
            rng,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph handle for a parameter, adding it on first use.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.g.param(self.store.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients after `backward`, indexed like the store. Unused parameters get `None`.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).cloned()))
            .collect()
    }
}

/// Finite-difference check of `f` with respect to every parameter in `store` plus `inputs`.
///
/// Runs in eval mode at 64-bit. `max_per_input` limits the probed coordinates per tensor.
pub fn grad_check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor<f64>> = store.values.iter().map(|v| (**v).clone()).collect();
    all.extend(inputs.iter().cloned());
    let np = store.len();
    grad_check_params(
        |g, vars| {
            let mut ctx = Ctx::prebound(g, store, &vars[..np], false, Rng::new(0));
            f(&mut ctx, &vars[np..])
        },
        &all,
        1e-5,
        max_per_input,
        seed,
    )
}
