//! Named parameter storage and its binding onto a [`Graph`].

use std::collections::BTreeMap;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters keyed by dotted name (`backbone.layer0.attn.wq`, `tpr.R`, ...).
/// Iteration order is lexicographic, which fixes checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name)
    }

    /// Panics on unknown names; model code only asks for names it registered.
    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> ParamVars {
        ParamVars {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a constant (inference; no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> ParamVars {
        ParamVars {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference over shared names.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.map
            .iter()
            .filter_map(|(k, v)| other.get(k).map(|o| v.max_abs_diff(o)))
            .fold(F::zero(), F::max)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    /// Gradients of all bound parameters after `g.backward`; parameters the
    /// loss does not depend on get zeros.
    pub fn grads<F: Scalar>(&self, g: &Graph<F>) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (k, &v) in &self.map {
            let grad = g
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.insert(k.clone(), grad);
        }
        out
    }
}
