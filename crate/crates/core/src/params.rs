//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// A full set of model weights, as saved in checkpoints and ensembled.
pub type WeightSnapshot<T> = ParamStore<T>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect(),
        }
    }

    /// Errors with the first name (in sorted order) whose presence or shape
    /// differs between the two stores.
    pub fn check_schema(&self, other: &Self) -> Result<()> {
        let mut a = self.tensors.iter();
        let mut b = other.tensors.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        return Err(Error::SchemaMismatch(na.min(nb).clone()));
                    }
                    if ta.shape() != tb.shape() {
                        return Err(Error::SchemaMismatch(format!("{na}: {:?} vs {:?}", ta.shape(), tb.shape())));
                    }
                }
                (Some((n, _)), None) | (None, Some((n, _))) => return Err(Error::SchemaMismatch(n.clone())),
            }
        }
    }
}

/// Parameter leaves of one graph, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients keyed by parameter name.
    pub fn collect<T: Scalar>(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            if let Some(t) = grads.get(v) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

/// `(1 - w)·a + w·b` per tensor.
///
/// Names starting with any prefix in `finetuned_only` are copied from `b`
/// regardless of `w`. The endpoints are exact copies of the inputs.
pub fn ensemble_weights<T: Scalar>(
    a: &WeightSnapshot<T>,
    b: &WeightSnapshot<T>,
    w: f64,
    finetuned_only: &[&str],
) -> Result<WeightSnapshot<T>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid("ensemble_weights", format!("w = {w} is outside [0, 1]")));
    }
    a.check_schema(b)?;
    let wt = T::lit(w);
    let one_minus = T::lit(1.0 - w);
    let mut out = ParamStore::new();
    for ((name, ta), (_, tb)) in a.tensors.iter().zip(&b.tensors) {
        let t = if finetuned_only.iter().any(|p| name.starts_with(p)) || w == 1.0 {
            tb.clone()
        } else if w == 0.0 {
            ta.clone()
        } else {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| one_minus * x + wt * y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        out.insert(name.clone(), t);
    }
    Ok(out)
}
